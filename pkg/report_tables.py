#!/usr/bin/env python3
"""
Report Tables
Console tables for a fitted model and CSV / Excel exports of the same rows
"""

import numpy as np
import pandas as pd

from diagnostics import PSRF_WARNING, GrReport
from effects import COMPONENTS, AllocationSummary, EffectSummary
from storage import frame_to_csv

LABELS = {'nde': 'NDE', 'nie': 'NIE', 'te': 'TE', 'nie_pos': 'NIE+', 'nie_neg': 'NIE-'}


def effects_frame(summary: EffectSummary) -> pd.DataFrame:
    rows = []
    for name in COMPONENTS:
        c = summary.components[name]
        rows.append({'effect': name, 'mean': c.mean, 'median': c.median, 'ci_low': c.ci_low, 'ci_high': c.ci_high})
    return pd.DataFrame(rows)


def pair_effects_frame(summary: EffectSummary) -> pd.DataFrame:
    rows = [{'q': p.pair[0], 'r': p.pair[1], 'nie_mean': p.mean, 'ci_low': p.ci_low, 'ci_high': p.ci_high,
             'inclusion_tau': p.inclusion_tau, 'inclusion_gamma': p.inclusion_gamma,
             'active': p.active, 'sign': p.sign}
            for p in summary.pair_effects]
    return pd.DataFrame(rows, columns=['q', 'r', 'nie_mean', 'ci_low', 'ci_high', 'inclusion_tau',
                                       'inclusion_gamma', 'active', 'sign'])


def inclusion_frame(summary: EffectSummary) -> pd.DataFrame:
    gamma = dict(summary.inclusion_probs_gamma.pairs())
    return pd.DataFrame([{'q': q, 'r': r, 'inclusion_tau': float(v), 'inclusion_gamma': float(gamma[(q, r)])}
                         for (q, r), v in summary.inclusion_probs_tau.pairs()])


def convergence_frame(report: GrReport) -> pd.DataFrame:
    rows = [{'parameter': name, 'psrf': e.psrf, 'n_draws': e.n_draws, 'flagged': not e.psrf < PSRF_WARNING}
            for name, e in report.entries.items()]
    return pd.DataFrame(rows, columns=['parameter', 'psrf', 'n_draws', 'flagged'])


def blocks_frame(allocation: AllocationSummary) -> pd.DataFrame:
    return pd.DataFrame([{'block': q, 'nodes': n} for q, n in allocation.block_sizes().items()])


def print_effects_table(summary: EffectSummary):
    """Posterior summaries of the causal effects"""
    print(f"\n" + "=" * 70)
    print(f"📊 EFFECTS  (Z = {summary.contrast[0]:.3g}, Z* = {summary.contrast[1]:.3g}, {summary.n_draws} draws)")
    print("=" * 70)
    print(f"{'Effect':<8} {'Mean':>12} {'Median':>12} {'2.5%':>12} {'97.5%':>12}")
    print("-" * 70)
    for name in COMPONENTS:
        c = summary.components[name]
        print(f"{LABELS[name]:<8} {c.mean:>12.4f} {c.median:>12.4f} {c.ci_low:>12.4f} {c.ci_high:>12.4f}")


def print_pair_table(summary: EffectSummary):
    print(f"\n" + "=" * 70)
    print(f"🧩 ACTIVE BLOCK PAIRS ({len(summary.active_pairs)})")
    print("=" * 70)
    active = [p for p in summary.pair_effects if p.active]
    if not active:
        print("No block pair reaches the 0.5 inclusion threshold in both regressions")
        return
    print(f"{'Pair':<10} {'NIE':>10} {'2.5%':>10} {'97.5%':>10} {'P(tau)':>8} {'P(gamma)':>9} {'Sign':>9}")
    print("-" * 70)
    for p in sorted(active, key=lambda p: -abs(p.mean)):
        pair = f"({p.pair[0]},{p.pair[1]})"
        print(f"{pair:<10} {p.mean:>10.4f} {p.ci_low:>10.4f} {p.ci_high:>10.4f} "
              f"{p.inclusion_tau:>8.2f} {p.inclusion_gamma:>9.2f} {p.sign:>9}")


def print_convergence_table(report: GrReport):
    print(f"\n" + "=" * 70)
    print(f"🔄 CONVERGENCE ({'split ' if report.split else ''}Gelman-Rubin)")
    print("=" * 70)
    print(f"{'Parameter':<12} {'PSRF':>10} {'Draws':>8}")
    print("-" * 70)
    for name, entry in report.entries.items():
        print(f"{name:<12} {entry.psrf:>10.4f} {entry.n_draws:>8}")
    for name in report.flagged():
        print(f"⚠️  PSRF for {name} is {report.entries[name].psrf:.3f} (> {PSRF_WARNING}); run longer chains")


def print_block_table(allocation: AllocationSummary):
    print(f"\n" + "=" * 70)
    print("🏷️  CONSENSUS BLOCKS")
    print("=" * 70)
    print(f"{'Block':<8} {'Nodes':>8}")
    print("-" * 70)
    for q, n in allocation.block_sizes().items():
        print(f"{q:<8} {n:>8}")


def export_edge_mask(mask: np.ndarray, path):
    frame_to_csv(pd.DataFrame(np.asarray(mask, dtype=int)), path, header=False)


def export_to_excel(path, summary: EffectSummary, report: GrReport = None, allocation: AllocationSummary = None):
    """Workbook with Effects, PairEffects, Inclusion, Convergence and Blocks sheets"""
    print(f"\n📊 Creating Excel file: {path}")
    with pd.ExcelWriter(path, engine='openpyxl') as writer:
        effects_frame(summary).to_excel(writer, sheet_name='Effects', index=False)
        pair_effects_frame(summary).to_excel(writer, sheet_name='PairEffects', index=False)
        inclusion_frame(summary).to_excel(writer, sheet_name='Inclusion', index=False)
        if report is not None:
            convergence_frame(report).to_excel(writer, sheet_name='Convergence', index=False)
        if allocation is not None:
            blocks_frame(allocation).to_excel(writer, sheet_name='Blocks', index=False)
    print(f"✅ Excel file created: {path}")
    return str(path)


def print_icl_table(results, best_q: int):
    print(f"\n" + "=" * 50)
    print("📋 BLOCK COUNT SELECTION (ICL)")
    print("=" * 50)
    print(f"{'Q':<6} {'ICL':>16} {'Converged':>12}")
    print("-" * 50)
    for res in results:
        marker = '  ⬅' if res.Q == best_q else ''
        print(f"{res.Q:<6} {res.icl_score:>16.3f} {str(res.converged):>12}{marker}")


def icl_frame(results) -> pd.DataFrame:
    return pd.DataFrame([{'Q': r.Q, 'icl': r.icl_score, 'loglik': r.loglik, 'converged': r.converged}
                         for r in results])
