#!/usr/bin/env python3
"""
Storage
Atomic, schema-versioned persistence for datasets, draws and reports.

Dataset directory layout:
    subjects.csv                 id, outcome, exposure, cov_1..cov_P, connectomes
    connectomes/<file>.csv       one V x V matrix per scan, no header
Multiple connectome files of one subject are separated by ';' and are
relative to the dataset directory.
"""

import hashlib
import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from core_types import DataError, Dataset, PosteriorDraws, SchemaError, SubjectRecord, validate_dataset

SCHEMA_VERSION = "1.0"
SUBJECTS_FILE = 'subjects.csv'
CONNECTOME_DIR = 'connectomes'
_COLUMN = re.compile(r'^(?P<name>[A-Za-z0-9_]+)\[(?P<index>\d+)\]$')
_INT_FIELDS = {'tau': np.int8, 'gamma': np.int8, 'labels': np.int64, 'iteration': np.int64}


def atomic_write_text(path, text: str) -> None:
    """Write a whole file through a temp file and a rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', newline='') as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, tuple)):
        return list(value)
    raise TypeError(f"cannot serialise {type(value).__name__}")


def save_json(path, payload: dict, kind: str) -> None:
    document = {'schema_version': SCHEMA_VERSION, 'kind': kind, **payload}
    atomic_write_text(path, json.dumps(document, indent=2, sort_keys=True, default=_json_default) + '\n')


def check_schema(document: dict, path) -> None:
    version = str(document.get('schema_version', ''))
    if not version:
        raise SchemaError(f"{path}: missing schema_version")
    try:
        major = int(version.split('.')[0])
    except ValueError:
        raise SchemaError(f"{path}: unreadable schema_version {version!r}") from None
    if major > int(SCHEMA_VERSION.split('.')[0]):
        raise SchemaError(f"{path}: schema version {version} is newer than supported {SCHEMA_VERSION}")


def load_json(path, kind: str = None) -> dict:
    """Load a JSON document written by save_json"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        with open(path, 'r') as f:
            document = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    check_schema(document, path)
    if kind is not None and document.get('kind') != kind:
        raise DataError(f"{path}: expected a {kind} file, found {document.get('kind')!r}")
    return document


def file_digest(path) -> str:
    sha = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            sha.update(chunk)
    return sha.hexdigest()


def frame_to_csv(frame: pd.DataFrame, path, **kwargs) -> None:
    kwargs.setdefault('index', False)
    atomic_write_text(path, frame.to_csv(float_format='%.17g', lineterminator='\n', **kwargs))


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

def load_matrix(path) -> np.ndarray:
    """Read one headerless numeric CSV matrix; errors name the file and row"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: connectome file not found")
    try:
        raw = pd.read_csv(path, header=None, dtype=str, skip_blank_lines=False)
    except pd.errors.ParserError as exc:
        raise DataError(f"{path}: malformed matrix ({exc})") from exc
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty matrix file") from None
    values = raw.apply(lambda col: pd.to_numeric(col.str.strip(), errors='coerce'))
    bad = values.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0]) + 1
        raise DataError(f"{path}: row {row} has missing or non-numeric entries")
    matrix = values.to_numpy(dtype=float)
    if matrix.shape[0] != matrix.shape[1]:
        raise DataError(f"{path}: matrix is {matrix.shape[0]} x {matrix.shape[1]}, expected square")
    return matrix


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write a dataset directory; returns the subjects table path"""
    out_dir = Path(out_dir)
    rows = []
    for i, subject in enumerate(dataset.subjects):
        files = []
        for k, matrix in enumerate(subject.connectomes):
            rel = f"{CONNECTOME_DIR}/subject_{i + 1:03d}_scan_{k + 1:02d}.csv"
            frame_to_csv(pd.DataFrame(np.asarray(matrix, dtype=float)), out_dir / rel, header=False)
            files.append(rel)
        row = {'id': i + 1, 'outcome': subject.outcome, 'exposure': subject.exposure}
        covariates = np.asarray(subject.covariates, dtype=float)[1:]
        row.update({f"cov_{j + 1}": value for j, value in enumerate(covariates)})
        row['connectomes'] = ';'.join(files)
        rows.append(row)
    columns = ['id', 'outcome', 'exposure'] + [f"cov_{j + 1}" for j in range(dataset.P)] + ['connectomes']
    subjects_path = out_dir / SUBJECTS_FILE
    frame_to_csv(pd.DataFrame(rows, columns=columns), subjects_path)
    return subjects_path


def load_dataset(source) -> Dataset:
    """Load and validate a dataset directory (or its subjects table)"""
    source = Path(source)
    subjects_path = source / SUBJECTS_FILE if source.is_dir() or not source.suffix else source
    if not subjects_path.exists():
        raise DataError(f"{subjects_path}: subjects table not found")
    base = subjects_path.parent
    try:
        table = pd.read_csv(subjects_path, float_precision='round_trip')
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{subjects_path}: malformed subjects table ({exc})") from exc

    missing = [c for c in ('outcome', 'exposure', 'connectomes') if c not in table.columns]
    if missing:
        raise DataError(f"{subjects_path}: missing columns {', '.join(missing)}")
    cov_cols = sorted((c for c in table.columns if c.startswith('cov_')), key=lambda c: int(c[4:]))

    subjects, V = [], None
    for r, row in enumerate(table.itertuples(index=False), start=2):
        record = row._asdict()
        files = [f.strip() for f in str(record['connectomes']).split(';') if f.strip()]
        if not files or str(record['connectomes']) == 'nan':
            raise DataError(f"{subjects_path}: line {r} lists no connectome files")
        matrices = [load_matrix(base / f) for f in files]
        V = V or matrices[0].shape[0]
        try:
            covariates = np.array([1.0] + [float(record[c]) for c in cov_cols])
            outcome, exposure = float(record['outcome']), float(record['exposure'])
        except (TypeError, ValueError) as exc:
            raise DataError(f"{subjects_path}: line {r} has a non-numeric value ({exc})") from exc
        subjects.append(SubjectRecord(outcome, exposure, covariates, matrices))

    if not subjects:
        raise DataError(f"{subjects_path}: no subjects")
    return validate_dataset(Dataset(subjects=subjects, V=V, P=len(cov_cols)))


# ---------------------------------------------------------------------------
# Posterior draws
# ---------------------------------------------------------------------------

def draws_frame(draws: PosteriorDraws) -> pd.DataFrame:
    """One row per stored draw; vector quantities spread over name[j] columns (1-based)"""
    frames = []
    for c, chain in enumerate(draws.chains):
        columns = {'chain': np.full(len(chain['iteration']), c)}
        for name, values in chain.items():
            values = np.asarray(values)
            if values.ndim == 1:
                columns[name] = values
            else:
                for j in range(values.shape[1]):
                    columns[f"{name}[{j + 1}]"] = values[:, j]
        frames.append(pd.DataFrame(columns))
    return pd.concat(frames, ignore_index=True)


def save_draws(draws: PosteriorDraws, csv_path, meta_path) -> None:
    frame_to_csv(draws_frame(draws), csv_path)
    meta = {
        'n_iter': draws.n_iter, 'burn_in': draws.burn_in, 'thin': draws.thin, 'seeds': draws.seeds,
        'Q': draws.Q, 'V': draws.V, 'contrast': list(draws.contrast), 'raw': draws.raw,
        'n_chains': draws.n_chains, 'draws_file': Path(csv_path).name, 'meta': draws.meta,
    }
    save_json(meta_path, meta, kind='draws')


def load_draws(csv_path, meta_path) -> PosteriorDraws:
    meta = load_json(meta_path, kind='draws')
    if not Path(csv_path).exists():
        raise DataError(f"{csv_path}: draws file not found")
    frame = pd.read_csv(csv_path, float_precision='round_trip')

    vectors, scalars = {}, []
    for col in frame.columns:
        match = _COLUMN.match(col)
        if match:
            vectors.setdefault(match['name'], []).append((int(match['index']), col))
        elif col != 'chain':
            scalars.append(col)

    chains = []
    for c in range(int(meta['n_chains'])):
        part = frame[frame['chain'] == c]
        chain = {}
        for name in scalars:
            chain[name] = part[name].to_numpy(dtype=_INT_FIELDS.get(name, float))
        for name, cols in vectors.items():
            ordered = [col for _, col in sorted(cols)]
            chain[name] = part[ordered].to_numpy(dtype=_INT_FIELDS.get(name, float))
        chains.append(chain)

    return PosteriorDraws(chains=chains, n_iter=meta['n_iter'], burn_in=meta['burn_in'], thin=meta['thin'],
                          seeds=meta['seeds'], Q=meta['Q'], V=meta['V'], contrast=tuple(meta['contrast']),
                          raw=meta['raw'], meta=meta.get('meta', {}))
