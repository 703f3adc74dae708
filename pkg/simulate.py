#!/usr/bin/env python3
"""
Simulation Designs
Synthetic connectome mediation data with known truth, plus the selection and
bias metrics used to score fitted models over replicates.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np
import pandas as pd

from core_types import (Allocation, Dataset, ModelState, SubjectRecord, as_model_data, n_pairs, pair_blocks,
                        pair_lookup)
from diagnostics import gr_report
from effects import (EffectDraw, EffectSummary, align_draws, allocation_summary, default_contrast, edge_mask,
                     effects_from_draw, summarize_effects)
from sampler import run_chains

# per-pair noise standard deviations: (sigma_1, sigma_2, sigma_qr)
NOISE_LEVELS = {'low': (0.1, 0.1, 0.1), 'high': (1.0, 0.5, 0.5)}
FIXED_GAMMA = (5, 10, 15, 20, 25, 30, 35, 40)
FIXED_TAU = (10, 15, 20, 25, 30, 40, 50, 55)
METRIC_COLUMNS = ['method', 'scenario', 'noise', 'replicate', 'sensitivity', 'specificity',
                  'bias_nde', 'bias_nie', 'bias_te']

BETA_Z = 1.5
BETA_M = 2.0
BETA_X = 1.0
ALPHA_X = 0.3
ALPHA_Z_RANGE = (1.5, 2.5)
OMEGA = 0.1
DIRICHLET_CONC = 3.0


@dataclass
class SimConfig:
    N: int = 50
    K: int = 6
    V: int = 100
    Q: int = 10
    scenario: int = 1
    noise: str = 'low'
    exposure_type: str = 'continuous'
    seed: int = 0
    p_active: float = 0.15
    n_active_tau: int = 8
    n_active_gamma: int = 8
    n_overlap: int = 6
    scenario2_layout: str = 'random'
    n_covariates: int = 1
    sigma_1: float = None
    sigma_2: float = None
    sigma_qr: float = None
    omega: float = None

    def __post_init__(self):
        for name in ('N', 'K', 'V', 'Q'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.Q > self.V:
            raise ValueError(f"Q={self.Q} exceeds the node count V={self.V}")
        if self.scenario not in (1, 2):
            raise ValueError(f"scenario must be 1 or 2, got {self.scenario}")
        if self.noise not in NOISE_LEVELS:
            raise ValueError(f"noise must be one of {', '.join(NOISE_LEVELS)}, got {self.noise!r}")
        if self.exposure_type not in ('continuous', 'binary'):
            raise ValueError(f"exposure_type must be continuous or binary, got {self.exposure_type!r}")
        if self.scenario2_layout not in ('random', 'fixed'):
            raise ValueError(f"scenario2_layout must be random or fixed, got {self.scenario2_layout!r}")
        if not 0.0 < self.p_active <= 1.0:
            raise ValueError(f"p_active must lie in (0, 1], got {self.p_active}")
        if self.n_covariates < 0:
            raise ValueError("n_covariates must be non-negative")
        for name in ('sigma_1', 'sigma_2', 'sigma_qr', 'omega'):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if self.scenario == 2:
            D = n_pairs(self.Q)
            if self.scenario2_layout == 'fixed':
                if D < max(FIXED_TAU):
                    raise ValueError(f"fixed scenario-2 layout needs at least {max(FIXED_TAU)} block pairs, Q={self.Q} gives {D}")
            else:
                if not 0 <= self.n_overlap <= min(self.n_active_tau, self.n_active_gamma):
                    raise ValueError("n_overlap must not exceed either active set size")
                needed = self.n_active_tau + self.n_active_gamma - self.n_overlap
                if needed > D:
                    raise ValueError(f"Q={self.Q} gives {D} block pairs, fewer than the {needed} requested active pairs")

    @classmethod
    def scaled(cls, **overrides) -> 'SimConfig':
        """Desk-scale preset"""
        settings = {'N': 50, 'V': 60, 'Q': 6, 'K': 4}
        settings.update(overrides)
        return cls(**settings)

    def noise_sd(self) -> dict:
        s1, s2, sqr = NOISE_LEVELS[self.noise]
        return {
            'sigma_1': s1 if self.sigma_1 is None else self.sigma_1,
            'sigma_2': s2 if self.sigma_2 is None else self.sigma_2,
            'sigma_qr': sqr if self.sigma_qr is None else self.sigma_qr,
            'omega': OMEGA if self.omega is None else self.omega,
        }

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> 'SimConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown simulation settings: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class GroundTruth:
    config: SimConfig
    state: ModelState
    effects: EffectDraw
    edge_mask: np.ndarray = field(repr=False)

    @property
    def allocation(self) -> Allocation:
        return self.state.allocation

    @property
    def active_pairs(self) -> list:
        qs, rs = pair_blocks(self.state.Q)
        both = (self.state.tau == 1) & (self.state.gamma == 1)
        return [(int(qs[d]) + 1, int(rs[d]) + 1) for d in np.flatnonzero(both)]

    def to_dict(self) -> dict:
        return {
            'config': self.config.to_dict(),
            'state': self.state.to_dict(),
            'effects': {'nde': self.effects.nde, 'nie': self.effects.nie, 'te': self.effects.te,
                        'nie_pos': self.effects.nie_pos, 'nie_neg': self.effects.nie_neg,
                        'contrast': list(self.effects.contrast)},
            'active_pairs': [list(p) for p in self.active_pairs],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'GroundTruth':
        config = SimConfig.from_dict(data['config'])
        state = ModelState.from_dict(data['state'])
        truth = cls(config, state, effects_from_draw(state, *data['effects']['contrast']), edge_mask=None)
        truth.edge_mask = edge_mask(truth.active_pairs, state.allocation)
        return truth


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def measurement_owners(n_meas) -> np.ndarray:
    n_meas = np.asarray(n_meas, dtype=np.intp)
    return np.repeat(np.arange(len(n_meas)), n_meas)


def sample_latent(state: ModelState, covariates, exposure, n_meas, rng: np.random.Generator):
    """Subject-level mediators and their per-measurement versions"""
    X = np.asarray(covariates, dtype=float)
    z = np.asarray(exposure, dtype=float)
    owners = measurement_owners(n_meas)
    D = len(state.alpha_z)
    M = (X @ state.alpha_x.T + np.outer(z, state.alpha_z * state.gamma)
         + rng.standard_normal((len(z), D)) * math.sqrt(state.sigma2_2))
    m_meas = M[owners] + rng.standard_normal((len(owners), D)) * np.sqrt(state.omega2_qr)
    return M, m_meas


def sample_observations(state: ModelState, covariates, exposure, n_meas, rng: np.random.Generator):
    """Outcomes (N,) and stacked connectomes (S, V, V) given every latent quantity"""
    X = np.asarray(covariates, dtype=float)
    z = np.asarray(exposure, dtype=float)
    labels = state.allocation.labels
    V = len(labels)
    iu = np.triu_indices(V, 1)
    pe = pair_lookup(state.Q)[labels[iu[0]], labels[iu[1]]]
    S = state.m_meas.shape[0]
    if S != len(measurement_owners(n_meas)):
        raise ValueError(f"state holds {S} measurements, n_meas adds up to {int(np.sum(n_meas))}")

    A = np.zeros((S, V, V))
    A[:, iu[0], iu[1]] = state.m_meas[:, pe] + rng.standard_normal((S, len(pe))) * np.sqrt(state.sigma2_qr[pe])
    A += np.swapaxes(A, 1, 2)

    y = (X @ state.beta_x + state.M @ (state.beta_m * state.tau) + z * state.beta_z
         + rng.standard_normal(len(z)) * math.sqrt(state.sigma2_1))
    return y, A


def _active_sets(config: SimConfig, rng: np.random.Generator):
    D = n_pairs(config.Q)
    if config.scenario == 1:
        active = np.zeros(D, dtype=np.int8)
        while not active.any():
            active = (rng.random(D) < config.p_active).astype(np.int8)
        return active.copy(), active.copy()

    tau = np.zeros(D, dtype=np.int8)
    gamma = np.zeros(D, dtype=np.int8)
    if config.scenario2_layout == 'fixed':
        tau[np.array(FIXED_TAU) - 1] = 1
        gamma[np.array(FIXED_GAMMA) - 1] = 1
        return tau, gamma
    k = config.n_overlap
    n_tau_only = config.n_active_tau - k
    chosen = rng.choice(D, size=config.n_active_tau + config.n_active_gamma - k, replace=False)
    tau[chosen[:k]] = gamma[chosen[:k]] = 1
    tau[chosen[k:k + n_tau_only]] = 1
    gamma[chosen[k + n_tau_only:]] = 1
    return tau, gamma


def generate(config: SimConfig):
    """Draw (Dataset, GroundTruth) for one simulation design"""
    rng = np.random.default_rng(config.seed)
    N, Q, V, K = config.N, config.Q, config.V, config.K
    D = n_pairs(Q)
    noise = config.noise_sd()

    if config.exposure_type == 'binary':
        z = (rng.random(N) < 0.5).astype(float)
    else:
        z = rng.standard_normal(N)
    X = np.column_stack([np.ones(N), rng.standard_normal((N, config.n_covariates))])

    pi = rng.dirichlet(np.full(Q, DIRICHLET_CONC))
    labels = rng.choice(Q, size=V, p=pi)
    tau, gamma = _active_sets(config, rng)

    alpha_z = np.zeros(D)
    alpha_z[gamma == 1] = np.linspace(*ALPHA_Z_RANGE, int(gamma.sum()))
    beta_m = np.full(D, BETA_M)

    state = ModelState(
        allocation=Allocation(labels, Q), pi=pi,
        M=np.zeros((N, D)), m_meas=np.zeros((N * K, D)),
        sigma2_qr=np.full(D, noise['sigma_qr'] ** 2), omega2_qr=np.full(D, noise['omega'] ** 2),
        beta_x=np.full(X.shape[1], BETA_X), beta_m=beta_m, beta_z=BETA_Z,
        alpha_x=np.full((D, X.shape[1]), ALPHA_X), alpha_z=alpha_z, tau=tau, gamma=gamma,
        sigma2_1=noise['sigma_1'] ** 2, sigma2_2=noise['sigma_2'] ** 2,
        sigma2_zm=float(np.mean(alpha_z[gamma == 1] ** 2)) if gamma.any() else 1.0,
        sigma2_my=BETA_M ** 2,
    )
    n_meas = np.full(N, K)
    state.M, state.m_meas = sample_latent(state, X, z, n_meas, rng)
    y, A = sample_observations(state, X, z, n_meas, rng)

    subjects = [
        SubjectRecord(outcome=float(y[i]), exposure=float(z[i]), covariates=X[i].copy(),
                      connectomes=[A[s] for s in range(i * K, (i + 1) * K)])
        for i in range(N)
    ]
    dataset = Dataset(subjects=subjects, V=V, P=config.n_covariates)

    effects = effects_from_draw(state, *default_contrast(z))
    truth = GroundTruth(config=config, state=state, effects=effects, edge_mask=None)
    truth.edge_mask = edge_mask(truth.active_pairs, state.allocation)
    return dataset, truth


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class SelectionMetrics:
    sensitivity: float
    specificity: float


def selection_metrics(truth_mask, estimated_mask) -> SelectionMetrics:
    """Edge-level rates over unordered off-diagonal node pairs

    A rate whose denominator is zero comes back as None.
    """
    truth = np.asarray(truth_mask)
    est = np.asarray(estimated_mask)
    if truth.shape != est.shape or truth.ndim != 2 or truth.shape[0] != truth.shape[1]:
        raise ValueError(f"masks must be square and equal in shape, got {truth.shape} and {est.shape}")
    iu = np.triu_indices(truth.shape[0], 1)
    t = truth[iu].astype(bool)
    e = est[iu].astype(bool)
    tp, fn = int(np.sum(t & e)), int(np.sum(t & ~e))
    tn, fp = int(np.sum(~t & ~e)), int(np.sum(~t & e))
    return SelectionMetrics(
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
    )


@dataclass
class EffectBias:
    values: dict
    absolute: set = field(default_factory=set)


def effect_bias(estimate: EffectSummary, truth: GroundTruth) -> EffectBias:
    """Percent bias of the posterior mean per effect

    A true value of 0 yields the absolute bias, listed in `absolute`.
    """
    out = EffectBias(values={})
    for name in ('nde', 'nie', 'te'):
        est = estimate.components[name].mean
        true = getattr(truth.effects, name)
        if true == 0:
            out.values[name] = est - true
            out.absolute.add(name)
        else:
            out.values[name] = 100.0 * (est - true) / true
    return out


# ---------------------------------------------------------------------------
# Replicate harness
# ---------------------------------------------------------------------------

def replicate_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(replicate)]).generate_state(1)[0])


@dataclass
class ReplicateResult:
    row: dict
    truth: GroundTruth
    summary: EffectSummary
    mask: np.ndarray = field(repr=False)
    psrf: dict = field(default_factory=dict)


def run_replicate(config: SimConfig, replicate: int, chain_config, hyper=None, verbose: bool = False) -> ReplicateResult:
    """Generate one replicate, fit it and score the fit against the truth"""
    seed = replicate_seed(config.seed, replicate)
    dataset, truth = generate(replace(config, seed=seed))
    chains = replace(chain_config, seed=seed, Q=chain_config.Q or config.Q)
    contrast = truth.effects.contrast
    draws = align_draws(run_chains(as_model_data(dataset), chains, hyper, contrast=contrast, verbose=verbose))

    summary = summarize_effects(draws, *contrast)
    consensus = allocation_summary(draws).consensus
    mask = edge_mask(summary.active_pairs, consensus)
    metrics = selection_metrics(truth.edge_mask, mask)
    bias = effect_bias(summary, truth)
    psrf = {}
    if draws.n_chains > 1:
        psrf = {name: e.psrf for name, e in gr_report(draws).entries.items()}

    row = {
        'method': 'BNMM', 'scenario': config.scenario, 'noise': config.noise, 'replicate': replicate,
        'sensitivity': metrics.sensitivity, 'specificity': metrics.specificity,
        'bias_nde': bias.values['nde'], 'bias_nie': bias.values['nie'], 'bias_te': bias.values['te'],
    }
    return ReplicateResult(row=row, truth=truth, summary=summary, mask=mask, psrf=psrf)


def _replicate_row(args):
    config, replicate, chain_config, hyper, verbose = args
    return run_replicate(config, replicate, chain_config, hyper, verbose=verbose).row


def run_benchmark(config: SimConfig, n_replicates: int, chain_config, hyper=None, n_jobs: int = 1,
                  verbose: bool = False) -> pd.DataFrame:
    """Metrics table, one row per replicate"""
    if n_replicates < 1:
        raise ValueError("n_replicates must be at least 1")
    jobs = [(config, r, chain_config, hyper, False) for r in range(n_replicates)]
    if n_jobs > 1 and n_replicates > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(_replicate_row, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_replicate_row(job))
            if verbose:
                row = rows[-1]
                print(f"🔄 replicate {row['replicate'] + 1}/{n_replicates}: "
                      f"sens {_fmt(row['sensitivity'])} spec {_fmt(row['specificity'])} bias TE {_fmt(row['bias_te'])}")
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def _fmt(value) -> str:
    return 'n/a' if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.2f}"


def summarize_benchmark(metrics: pd.DataFrame) -> pd.DataFrame:
    """Per design: 'mean (sd)' of every metric over replicates"""
    value_cols = METRIC_COLUMNS[4:]
    numeric = metrics.copy()
    numeric[value_cols] = numeric[value_cols].apply(pd.to_numeric, errors='coerce')
    grouped = numeric.groupby(['method', 'scenario', 'noise'], sort=False)[value_cols]
    means, sds = grouped.mean(), grouped.std(ddof=1).fillna(0.0)
    table = means.copy().astype(object)
    for col in value_cols:
        table[col] = [f"{m:.2f} ({s:.2f})" if not math.isnan(m) else 'n/a' for m, s in zip(means[col], sds[col])]
    return table.reset_index()
