#!/usr/bin/env python3
"""
Convergence Diagnostics
Gelman-Rubin potential scale reduction over multiple chains and long-format
trace export for plotting.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from core_types import DataError, PosteriorDraws
from effects import COMPONENTS, effect_streams
from storage import atomic_write_text

PSRF_WARNING = 1.1
TRACE_COLUMNS = ['chain', 'iteration', 'parameter', 'value']
MONITORED = ('beta_z', 'sigma2_1', 'sigma2_2', 'nde', 'nie', 'te', 'n_active')


def _as_chains(chains) -> np.ndarray:
    seqs = [np.asarray(c, dtype=float).ravel() for c in chains]
    if len(seqs) < 2:
        raise ValueError("Gelman-Rubin needs at least 2 chains")
    n = min(len(s) for s in seqs)
    if n < 2:
        raise ValueError("Gelman-Rubin needs at least 2 draws per chain")
    return np.stack([s[:n] for s in seqs])


def split_chains(chains) -> np.ndarray:
    """Cut every chain into its first and second half"""
    arr = _as_chains(chains)
    half = arr.shape[1] // 2
    if half < 2:
        raise ValueError("split PSRF needs at least 4 draws per chain")
    return np.concatenate([arr[:, :half], arr[:, -half:]])


def gelman_rubin(chains, split: bool = False) -> float:
    """Potential scale reduction factor of one scalar

    Chains are truncated to the shortest one. W = 0 gives 1 when the chain
    means agree and +inf otherwise.
    """
    arr = split_chains(chains) if split else _as_chains(chains)
    m, n = arr.shape
    means = arr.mean(axis=1)
    W = float(arr.var(axis=1, ddof=1).mean())
    B = float(n / (m - 1) * ((means - means.mean()) ** 2).sum())
    if W <= 0:
        return 1.0 if B <= 0 else float('inf')
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


@dataclass
class PsrfEntry:
    psrf: float
    chain_means: list
    chain_variances: list
    n_draws: int


@dataclass
class GrReport:
    entries: dict = field(default_factory=dict)
    split: bool = False

    def flagged(self, threshold: float = PSRF_WARNING) -> list:
        return [name for name, e in self.entries.items() if not e.psrf < threshold]

    def to_dict(self) -> dict:
        return {
            'split': self.split,
            'threshold': PSRF_WARNING,
            'flagged': self.flagged(),
            'scalars': {
                name: {'psrf': e.psrf if np.isfinite(e.psrf) else None,
                       'chain_means': e.chain_means, 'chain_variances': e.chain_variances,
                       'n_draws': e.n_draws}
                for name, e in self.entries.items()
            },
        }


def monitored_scalars(draws: PosteriorDraws, contrast: tuple = None) -> dict:
    """Relabelling-invariant scalar streams per chain: {name: [array per chain]}

    With a contrast, nde/nie/te are recomputed for it instead of read from
    the effects stored at fit time.
    """
    effects = None
    if contrast is not None:
        effects = [effect_streams(replace(draws, chains=[c]), *contrast) for c in draws.chains]
    out = {}
    for name in MONITORED:
        if name == 'n_active':
            out[name] = [np.asarray(c['tau'], dtype=float).sum(axis=1) + np.asarray(c['gamma'], dtype=float).sum(axis=1)
                         for c in draws.chains]
        elif effects is not None and name in COMPONENTS:
            out[name] = [e[name] for e in effects]
        else:
            out[name] = [np.asarray(c[name], dtype=float) for c in draws.chains]
    return out


def gr_report(draws: PosteriorDraws, split: bool = False, contrast: tuple = None) -> GrReport:
    report = GrReport(split=split)
    for name, seqs in monitored_scalars(draws, contrast).items():
        arr = _as_chains(seqs)
        report.entries[name] = PsrfEntry(
            psrf=gelman_rubin(arr, split=split),
            chain_means=arr.mean(axis=1).tolist(),
            chain_variances=arr.var(axis=1, ddof=1).tolist(),
            n_draws=arr.shape[1],
        )
    return report


def trace_frame(draws: PosteriorDraws, contrast: tuple = None) -> pd.DataFrame:
    frames = []
    for c, (chain, streams) in enumerate(zip(draws.chains, zip(*monitored_scalars(draws, contrast).values()))):
        iterations = np.asarray(chain['iteration'])
        for name, values in zip(MONITORED, streams):
            frames.append(pd.DataFrame({'chain': c, 'iteration': iterations, 'parameter': name, 'value': values}))
    if not frames:
        return pd.DataFrame(columns=TRACE_COLUMNS)
    return pd.concat(frames, ignore_index=True)[TRACE_COLUMNS]


def trace_export(draws: PosteriorDraws, path, contrast: tuple = None) -> str:
    """Write chain,iteration,parameter,value rows for every monitored scalar"""
    text = trace_frame(draws, contrast).to_csv(index=False, float_format='%.17g', lineterminator='\n')
    atomic_write_text(path, text)
    return str(path)


def trace_import(path) -> dict:
    """Read a trace CSV back into {parameter: [array per chain]}"""
    frame = pd.read_csv(path, float_precision='round_trip')
    if list(frame.columns) != TRACE_COLUMNS:
        raise DataError(f"{path}: expected columns {','.join(TRACE_COLUMNS)}")
    out = {}
    for name, group in frame.groupby('parameter', sort=False):
        out[name] = [g.sort_values('iteration')['value'].to_numpy() for _, g in group.groupby('chain', sort=True)]
    return out
