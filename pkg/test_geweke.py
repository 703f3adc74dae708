#!/usr/bin/env python3
"""
Joint-distribution test of the Gibbs sweep

Two ways of drawing (parameters, data) must agree:
  * marginal-conditional: parameters from the prior, then data given them
  * successive-conditional: alternate data given parameters with one sweep
    of parameters given data, starting from a prior draw
Any conditional that targets the wrong distribution shifts the
successive-conditional moments away from the prior ones.

Hyperparameters keep the edges weakly informative so the allocation and the
block parameters mix within a few sweeps.
"""

import numpy as np
import pytest

from core_types import Hyperparams, ModelData
from sampler import sample_prior_state, sweep
from simulate import measurement_owners, sample_observations

pytestmark = pytest.mark.slow

N, K, V, Q = 8, 2, 12, 2
N_DRAWS = 20000
N_BATCHES = 50
Z_LIMIT = 4.0

HYPER = Hyperparams(p_gamma=0.5, p_tau=0.5, dirichlet_conc=2.0,
                    a1=50.0, b1=1470.0, a2=6.0, b2=0.5,
                    ig_noninf_shape=6.0, ig_noninf_scale=0.5,
                    sigma2_xy=0.1, sigma2_zy=0.1, sigma2_xm=0.1)


def statistics(state) -> np.ndarray:
    return np.array([
        state.beta_z,
        state.beta_z ** 2,
        state.sigma2_1,
        state.sigma2_2,
        state.sigma2_my,
        state.tau.mean(),
        state.gamma.mean(),
        state.beta_x[0],
        state.beta_m[0] ** 2,
        state.alpha_z.mean(),
        state.M.mean(),
        state.m_meas.mean(),
        state.sigma2_qr.mean(),
        state.omega2_qr.mean(),
        state.pi.max(),
    ])


STAT_NAMES = ['beta_z', 'beta_z^2', 'sigma2_1', 'sigma2_2', 'sigma2_my', 'tau rate', 'gamma rate',
              'beta_x[0]', 'beta_m[0]^2', 'mean alpha_z', 'mean M', 'mean m_meas', 'mean sigma2_qr',
              'mean omega2_qr', 'max pi']


def _design(rng):
    z = rng.standard_normal(N)
    X = np.column_stack([np.ones(N), rng.standard_normal(N)])
    return X, z, np.full(N, K)


def _batch_se(values: np.ndarray) -> np.ndarray:
    batches = values[: len(values) // N_BATCHES * N_BATCHES].reshape(N_BATCHES, -1, values.shape[1]).mean(axis=1)
    return batches.std(axis=0, ddof=1) / np.sqrt(N_BATCHES)


def test_sweep_preserves_the_prior():
    rng = np.random.default_rng(2024)
    X, z, n_meas = _design(rng)
    owners = measurement_owners(n_meas)

    marginal = np.array([statistics(sample_prior_state(X, z, owners, V, Q, HYPER, rng)) for _ in range(N_DRAWS)])

    base = ModelData.from_arrays(np.zeros(N), z, X, np.zeros((len(owners), V, V)), owners)
    state = sample_prior_state(X, z, owners, V, Q, HYPER, rng)
    successive = np.empty_like(marginal)
    for t in range(N_DRAWS):
        y, A = sample_observations(state, X, z, n_meas, rng)
        sweep(state, base.with_observations(y, A), HYPER, rng)
        successive[t] = statistics(state)

    se_marginal = marginal.std(axis=0, ddof=1) / np.sqrt(N_DRAWS)
    se_successive = _batch_se(successive)
    scores = (marginal.mean(axis=0) - successive.mean(axis=0)) / np.sqrt(se_marginal ** 2 + se_successive ** 2)
    failures = [f"{name}: z = {score:.2f}" for name, score in zip(STAT_NAMES, scores) if abs(score) > Z_LIMIT]
    assert not failures, '; '.join(failures)
