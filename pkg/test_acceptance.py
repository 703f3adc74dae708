#!/usr/bin/env python3
"""
Recovery checks on the desk-scale design (N=50, V=60, Q=6, K=4)

The replicate runs use the default block-average start and three chains,
ten replicates of 3,000 sweeps with 1,000 burn-in each.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import pytest

from core_types import as_model_data
from effects import allocation_summary, edge_mask, summarize_effects
from sampler import ChainConfig, run_chains
from simulate import SimConfig, effect_bias, generate, run_benchmark, run_replicate, selection_metrics

pytestmark = pytest.mark.slow

REPLICATES = 10
CHAINS = ChainConfig(n_iter=3000, burn_in=1000, n_chains=3, Q=6)
WORKERS = max(1, min(REPLICATES, os.cpu_count() or 1))


def _replicates(config: SimConfig) -> list:
    n = REPLICATES
    with ProcessPoolExecutor(max_workers=WORKERS) as pool:
        return list(pool.map(run_replicate, [config] * n, range(n), [CHAINS] * n))


@pytest.fixture(scope='module')
def low_noise():
    return _replicates(SimConfig.scaled(scenario=1, noise='low', seed=11))


@pytest.fixture(scope='module')
def truth_start():
    dataset, truth = generate(SimConfig.scaled(scenario=1, noise='low', seed=11))
    config = ChainConfig(n_iter=600, burn_in=200, n_chains=2, Q=6, seed=11, init_mode='truth')
    draws = run_chains(as_model_data(dataset), config, init_state=truth.state, contrast=truth.effects.contrast)
    return truth, draws, summarize_effects(draws, *truth.effects.contrast)


def test_direct_effect_recovered_from_truth_start(truth_start):
    truth, draws, _ = truth_start
    beta_z = draws.stack('beta_z').mean()
    assert beta_z == pytest.approx(truth.state.beta_z, rel=0.10)
    bias = effect_bias(truth_start[2], truth)
    assert abs(bias.values['nde']) <= 10.0


def test_low_noise_selection_and_total_effect(low_noise):
    rows = [r.row for r in low_noise]
    assert sum(r['sensitivity'] for r in rows) / len(rows) >= 0.95
    assert sum(r['specificity'] for r in rows) / len(rows) >= 0.98
    assert abs(sum(r['bias_te'] for r in rows) / len(rows)) <= 5.0


def test_low_noise_chains_converge(low_noise):
    converged = [all(r.psrf[name] < 1.1 for name in ('beta_z', 'sigma2_1', 'te')) for r in low_noise]
    assert sum(converged) >= 9


def test_total_effect_interval_coverage(low_noise):
    covered = [r.summary.components['te'].ci_low <= r.truth.effects.te <= r.summary.components['te'].ci_high
               for r in low_noise]
    assert sum(covered) >= 8


def test_high_noise_selection():
    config = SimConfig.scaled(scenario=2, noise='high', seed=11)
    metrics = run_benchmark(config, REPLICATES, CHAINS, n_jobs=WORKERS)
    assert metrics['sensitivity'].mean() >= 0.70
    assert metrics['specificity'].mean() >= 0.95


def test_pooled_selection_no_worse_than_single_chains():
    dataset, truth = generate(SimConfig.scaled(scenario=1, noise='low', seed=11))
    config = ChainConfig(n_iter=300, burn_in=100, n_chains=3, Q=6, seed=11)
    contrast = truth.effects.contrast
    draws = run_chains(as_model_data(dataset), config, contrast=contrast)

    def scored(part):
        summary = summarize_effects(part, *contrast)
        return selection_metrics(truth.edge_mask, edge_mask(summary.active_pairs, allocation_summary(part).consensus))

    singles = [scored(replace(draws, chains=[chain], seeds=[seed])) for chain, seed in zip(draws.chains, draws.seeds)]
    pooled = scored(draws)
    assert pooled.sensitivity >= min(s.sensitivity for s in singles)
    assert pooled.specificity >= min(s.specificity for s in singles)
