#!/usr/bin/env python3
"""
Network Mediation Command Line
Batch front door for simulating data, choosing the block count, fitting the
sampler and reporting effects.

    python cli.py simulate --scenario 1 --noise low --seed 7 --out sim
    python cli.py select-q --data sim --q-range 2:12 --out icl
    python cli.py fit --data sim --Q 10 --iters 5000 --burn 2000 --out run
    python cli.py report --run run --excel
    python cli.py bench --scenario 1 --replicates 10 --scaled --out bench

Runtime settings are read from the environment (or a .env file):
    BNMM_THREADS          worker processes for chains and replicates (default 1)
    BNMM_PROGRESS_EVERY   sweeps between progress lines (default 500)

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import load_dotenv

import report_tables
from core_types import DataError, Hyperparams, NumericError, as_model_data, standardize_covariates
from diagnostics import gr_report, trace_export
from effects import align_draws, allocation_summary, edge_mask, summarize_effects
from sampler import ChainConfig, run_chains
from sbm import select_q
from simulate import GroundTruth, SimConfig, generate, run_benchmark, summarize_benchmark
from storage import (check_schema, file_digest, frame_to_csv, load_dataset, load_draws, load_json,
                     save_dataset, save_draws, save_json)

__version__ = "1.0.0"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Invalid flags or a refused overwrite"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def get_settings() -> dict:
    """Runtime settings from the environment"""
    load_dotenv()
    try:
        return {
            'threads': max(1, int(os.getenv('BNMM_THREADS', '1'))),
            'progress_every': max(0, int(os.getenv('BNMM_PROGRESS_EVERY', '500'))),
        }
    except ValueError as exc:
        raise UsageError(f"invalid environment setting: {exc}") from exc


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    hyper: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    started: str = ''
    seconds: float = 0.0

    def save(self, out_dir: Path, name: str = 'manifest.json'):
        save_json(out_dir / name, asdict(self), kind='manifest')
        print(f"💾 Manifest saved to: {out_dir / name}")


def prepare_output(out, force: bool, guard: list = None) -> Path:
    """Create the output directory, refusing to overwrite unless forced"""
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if not force:
        clashes = [out / name for name in guard] if guard else ([out] if out.exists() and any(out.iterdir()) else [])
        clashes = [p for p in clashes if p.exists()]
        if clashes:
            raise UsageError(f"{clashes[0]} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def parse_q_range(text: str):
    try:
        low, high = (int(part) for part in text.split(':'))
    except ValueError:
        raise UsageError(f"--q-range expects a:b, got {text!r}") from None
    if not 1 <= low <= high:
        raise UsageError(f"--q-range needs 1 <= a <= b, got {text!r}")
    return low, high


def _started() -> str:
    return datetime.now(timezone.utc).isoformat()


def _data_digests(data_dir) -> dict:
    data_dir = Path(data_dir)
    subjects = data_dir / 'subjects.csv' if data_dir.is_dir() else data_dir
    digests = {str(subjects): file_digest(subjects)}
    for path in sorted((subjects.parent / 'connectomes').glob('*.csv')):
        digests[str(path)] = file_digest(path)
    return digests


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    print("🧪 SIMULATE")
    print("=" * 40)
    started, t0 = _started(), time.time()
    overrides = {k: v for k, v in {'N': args.N, 'K': args.K, 'V': args.V, 'Q': args.Q}.items() if v is not None}
    settings = dict(scenario=args.scenario, noise=args.noise, exposure_type=args.exposure, seed=args.seed,
                    scenario2_layout=args.layout, **overrides)
    config = SimConfig.scaled(**settings) if args.scaled else SimConfig(**settings)
    out = prepare_output(args.out, args.force)

    dataset, truth = generate(config)
    subjects_path = save_dataset(dataset, out)
    save_json(out / 'truth.json', truth.to_dict(), kind='truth')
    print(f"✅ Generated {dataset.N} subjects x {config.K} scans over {config.V} nodes, Q={config.Q}")
    print(f"📊 Truth: NDE {truth.effects.nde:.4f}, NIE {truth.effects.nie:.4f}, TE {truth.effects.te:.4f}, "
          f"{len(truth.active_pairs)} active pairs")
    print(f"💾 Dataset saved to: {subjects_path}")

    RunManifest('simulate', args.argv, config.to_dict(), seeds=[config.seed],
                outputs=[str(subjects_path), str(out / 'truth.json')],
                started=started, seconds=time.time() - t0).save(out)
    return EXIT_OK


def cmd_select_q(args) -> int:
    print("📋 SELECT Q")
    print("=" * 40)
    started, t0 = _started(), time.time()
    q_min, q_max = parse_q_range(args.q_range)
    out = prepare_output(args.out, args.force, guard=['icl.csv'])
    settings = get_settings()

    print(f"📂 Loading dataset from {args.data}")
    dataset = load_dataset(args.data)
    results, best_q = select_q(dataset, q_min, q_max, seed=args.seed, n_restarts=args.restarts,
                               n_jobs=settings['threads'], verbose=True)
    report_tables.print_icl_table(results, best_q)
    frame_to_csv(report_tables.icl_frame(results), out / 'icl.csv')
    save_json(out / 'select_q.json', {'best_Q': best_q, 'q_range': [q_min, q_max]}, kind='select_q')
    print(f"\n✅ Selected Q = {best_q}")
    print(f"💾 ICL table saved to: {out / 'icl.csv'}")

    RunManifest('select-q', args.argv, {'q_range': [q_min, q_max], 'restarts': args.restarts},
                seeds=[args.seed], inputs=_data_digests(args.data), outputs=[str(out / 'icl.csv')],
                started=started, seconds=time.time() - t0).save(out)
    return EXIT_OK


def load_fit_config(path) -> tuple:
    """(chain settings, hyperparameters) from a JSON config file"""
    if path is None:
        return {}, {}
    document = read_config_json(path)
    if "schema_version" in document:
        check_schema(document, path)
    unknown = set(document) - {'chain', 'hyper', 'schema_version', 'kind'}
    if unknown:
        raise UsageError(f"{path}: unknown sections {', '.join(sorted(unknown))}")
    return dict(document.get('chain', {})), dict(document.get('hyper', {}))


def read_config_json(path) -> dict:
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def cmd_fit(args) -> int:
    print("⛓️  FIT")
    print("=" * 40)
    started, t0 = _started(), time.time()
    chain_settings, hyper_settings = load_fit_config(args.config)
    flags = {'n_iter': args.iters, 'burn_in': args.burn, 'thin': args.thin, 'n_chains': args.chains,
             'seed': args.seed, 'Q': args.Q, 'init_mode': args.init}
    chain_settings.update({k: v for k, v in flags.items() if v is not None})
    hyper = Hyperparams.from_dict(hyper_settings)
    out = prepare_output(args.out, args.force, guard=['draws.csv'])
    settings = get_settings()

    print(f"📂 Loading dataset from {args.data}")
    dataset = load_dataset(args.data)
    if args.standardize:
        dataset = standardize_covariates(dataset)
        print("🔄 Covariates standardized")
    data = as_model_data(dataset)
    print(f"✅ {data.N} subjects, {data.S} scans, {data.V} nodes, {data.P} covariates")

    if chain_settings.get('Q') is None:
        if args.q_range is None:
            raise UsageError("fit needs --Q or --q-range")
        q_min, q_max = parse_q_range(args.q_range)
        results, best_q = select_q(data, q_min, q_max, seed=chain_settings.get('seed', 0),
                                   n_jobs=settings['threads'], verbose=True)
        chain_settings['Q'] = best_q
        print(f"✅ Selected Q = {best_q} by ICL")
    config = ChainConfig.from_dict(chain_settings)

    init_state = None
    if config.init_mode == 'truth':
        if args.truth is None:
            raise UsageError("--init truth needs --truth path/to/truth.json")
        init_state = GroundTruth.from_dict(load_json(args.truth, kind='truth')).state

    print(f"🔄 Running {config.n_chains} chain(s): {config.n_iter} sweeps, {config.burn_in} burn-in, "
          f"thin {config.thin}, Q={config.Q}")
    draws = run_chains(data, config, hyper, n_jobs=settings['threads'], init_state=init_state,
                       verbose=True, progress_every=settings['progress_every'])
    save_draws(draws, out / 'draws.csv', out / 'draws.json')
    print(f"💾 {draws.n_draws} draws saved to: {out / 'draws.csv'}")

    inputs = _data_digests(args.data)
    if args.config:
        inputs[str(args.config)] = file_digest(args.config)
    RunManifest('fit', args.argv, {**config.to_dict(), 'standardize': args.standardize},
                hyper=hyper.to_dict(), seeds=draws.seeds, inputs=inputs,
                outputs=[str(out / 'draws.csv'), str(out / 'draws.json')],
                started=started, seconds=time.time() - t0).save(out)
    return EXIT_OK


def cmd_report(args) -> int:
    print("📊 REPORT")
    print("=" * 40)
    started, t0 = _started(), time.time()
    run = Path(args.run)
    out = prepare_output(args.out or run, args.force, guard=['effects.json'])
    print(f"📂 Loading draws from {run}")
    draws = align_draws(load_draws(run / 'draws.csv', run / 'draws.json'))
    contrast = tuple(args.contrast) if args.contrast else tuple(draws.contrast)

    summary = summarize_effects(draws, *contrast)
    allocation = allocation_summary(draws)
    mask = edge_mask(summary.active_pairs, allocation.consensus)

    report_tables.print_effects_table(summary)
    report_tables.print_pair_table(summary)
    report_tables.print_block_table(allocation)

    outputs = [out / 'effects.json', out / 'trace.csv', out / 'edge_mask.csv', out / 'allocation.csv']
    report = None
    if draws.n_chains >= 2:
        report = gr_report(draws, split=args.split, contrast=contrast)
        report_tables.print_convergence_table(report)
        save_json(out / 'convergence.json', report.to_dict(), kind='convergence')
        outputs.append(out / 'convergence.json')
    else:
        print("\n⚠️  Only one chain stored; Gelman-Rubin needs at least two")

    payload = summary.to_dict()
    payload['block_sizes'] = {str(q): n for q, n in allocation.block_sizes().items()}
    save_json(out / 'effects.json', payload, kind='effects')
    trace_export(draws, out / 'trace.csv', contrast=contrast)
    report_tables.export_edge_mask(mask, out / 'edge_mask.csv')
    frame_to_csv(pd.DataFrame({'node': np.arange(1, draws.V + 1), 'block': allocation.consensus.block_ids()}),
                 out / 'allocation.csv')
    if args.excel:
        report_tables.export_to_excel(out / 'report.xlsx', summary, report, allocation)
        outputs.append(out / 'report.xlsx')

    print(f"\n💾 Effects saved to: {out / 'effects.json'}")
    print(f"💾 Trace saved to: {out / 'trace.csv'}")
    print(f"💾 Edge mask saved to: {out / 'edge_mask.csv'}")
    inputs = {str(run / name): file_digest(run / name) for name in ('draws.csv', 'draws.json')}
    RunManifest('report', args.argv, {'contrast': list(contrast), 'split': args.split, 'excel': args.excel},
                seeds=draws.seeds, inputs=inputs, outputs=[str(p) for p in outputs],
                started=started, seconds=time.time() - t0).save(out, name='report_manifest.json')
    return EXIT_OK


def cmd_bench(args) -> int:
    print("🏁 BENCH")
    print("=" * 40)
    started, t0 = _started(), time.time()
    settings = dict(scenario=args.scenario, noise=args.noise, seed=args.seed, scenario2_layout=args.layout)
    config = SimConfig.scaled(**settings) if args.scaled else SimConfig(**settings)
    chains = ChainConfig(n_iter=args.iters, burn_in=args.burn, n_chains=args.chains, seed=args.seed, Q=config.Q)
    out = prepare_output(args.out, args.force, guard=['metrics.csv'])
    env = get_settings()

    metrics = run_benchmark(config, args.replicates, chains, n_jobs=env['threads'], verbose=True)
    table = summarize_benchmark(metrics)
    frame_to_csv(metrics, out / 'metrics.csv')
    frame_to_csv(table, out / 'summary.csv')
    print(f"\n{table.to_string(index=False)}")
    print(f"\n💾 Metrics saved to: {out / 'metrics.csv'}")

    RunManifest('bench', args.argv, {'simulation': config.to_dict(), 'chain': chains.to_dict(),
                                     'replicates': args.replicates},
                seeds=[args.seed], outputs=[str(out / 'metrics.csv'), str(out / 'summary.csv')],
                started=started, seconds=time.time() - t0).save(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='cli.py', description='Bayesian network mediation analysis of connectomes')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', help='generate a synthetic dataset with known truth')
    p.add_argument('--scenario', type=int, choices=[1, 2], default=1)
    p.add_argument('--noise', choices=['low', 'high'], default='low')
    p.add_argument('--exposure', choices=['continuous', 'binary'], default='continuous')
    p.add_argument('--layout', choices=['random', 'fixed'], default='random',
                   help='scenario-2 active set layout')
    p.add_argument('--N', type=int)
    p.add_argument('--K', type=int)
    p.add_argument('--V', type=int)
    p.add_argument('--Q', type=int)
    p.add_argument('--scaled', action='store_true', help='desk-scale preset (V=60, Q=6, K=4)')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.add_argument('--force', action='store_true')
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('select-q', help='choose the block count by ICL')
    p.add_argument('--data', required=True)
    p.add_argument('--q-range', default='2:10')
    p.add_argument('--restarts', type=int, default=10)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.add_argument('--force', action='store_true')
    p.set_defaults(func=cmd_select_q)

    p = sub.add_parser('fit', help='run the Gibbs sampler')
    p.add_argument('--data', required=True)
    p.add_argument('--config', help='JSON file with "chain" and "hyper" sections')
    p.add_argument('--Q', type=int)
    p.add_argument('--q-range', help='select Q by ICL over a:b when --Q is not given')
    p.add_argument('--iters', type=int)
    p.add_argument('--burn', type=int)
    p.add_argument('--thin', type=int)
    p.add_argument('--chains', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--init', choices=['block-average', 'random', 'truth'])
    p.add_argument('--truth', help='truth.json for --init truth')
    p.add_argument('--standardize', action='store_true')
    p.add_argument('--out', required=True)
    p.add_argument('--force', action='store_true')
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser('report', help='summarize a fit')
    p.add_argument('--run', required=True, help='fit output directory')
    p.add_argument('--out', help='defaults to the run directory')
    p.add_argument('--contrast', type=float, nargs=2, metavar=('Z', 'Z_STAR'))
    p.add_argument('--split', action='store_true', help='split-chain PSRF')
    p.add_argument('--excel', action='store_true')
    p.add_argument('--force', action='store_true')
    p.set_defaults(func=cmd_report)

    p = sub.add_parser('bench', help='simulate, fit and score replicates')
    p.add_argument('--scenario', type=int, choices=[1, 2], default=1)
    p.add_argument('--noise', choices=['low', 'high'], default='low')
    p.add_argument('--layout', choices=['random', 'fixed'], default='random')
    p.add_argument('--replicates', type=int, default=10)
    p.add_argument('--iters', type=int, default=3000)
    p.add_argument('--burn', type=int, default=1000)
    p.add_argument('--chains', type=int, default=3)
    p.add_argument('--scaled', action='store_true')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.add_argument('--force', action='store_true')
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except UsageError as e:
        print(f"❌ {e}")
        return EXIT_USAGE
    except DataError as e:
        print(f"❌ Data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        print(f"❌ Numeric failure: {e}")
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"❌ {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
