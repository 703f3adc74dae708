#!/usr/bin/env python3
"""
Gibbs Sampler
One sweep draws every unknown of the network mediation model from its
closed-form full conditional:

    beta_m -> alpha_z -> (tau, gamma) -> (beta_x, alpha_x) -> beta_z
           -> (M, m_meas) -> (allocation, pi) -> variances

Every update takes the current ModelState, a ModelData view of the
observations, the Hyperparams and a numpy Generator, and returns the new
values without touching the state. `sweep` applies them in order.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np
import scipy.linalg
from scipy.special import expit, logit, logsumexp
from scipy.stats import invgamma

from core_types import (Allocation, Hyperparams, ModelData, ModelState, NumericError, PosteriorDraws,
                        as_model_data, n_pairs, pair_lookup)
from effects import default_contrast, effects_from_arrays
from sbm import LOG_2PI, block_averages, edge_pair_stats, fit_pooled_sbm

INIT_MODES = ('random', 'block-average', 'truth')
DEFAULT_STEPS = ('beta_m', 'alpha_z', 'indicators', 'nuisance', 'beta_z', 'latent', 'allocation', 'variances')
PROGRESS_EVERY = 500


@dataclass
class ChainConfig:
    n_iter: int = 5000
    burn_in: int = 2000
    thin: int = 1
    n_chains: int = 3
    seed: int = 0
    Q: int = None
    init_mode: str = 'block-average'
    raw: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be positive, got {self.n_iter}")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError(f"burn_in must satisfy 0 <= burn_in < n_iter, got {self.burn_in} / {self.n_iter}")
        if self.thin < 1:
            raise ValueError(f"thin must be at least 1, got {self.thin}")
        if self.n_chains < 1:
            raise ValueError(f"n_chains must be at least 1, got {self.n_chains}")
        if self.Q is not None and self.Q < 1:
            raise ValueError(f"Q must be at least 1, got {self.Q}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {', '.join(INIT_MODES)}, got {self.init_mode!r}")

    def stored_iterations(self) -> np.ndarray:
        """1-based sweep numbers that end up in the draws"""
        its = np.arange(1, self.n_iter + 1)
        if self.raw:
            return its[its % self.thin == 0]
        return its[(its > self.burn_in) & ((its - self.burn_in) % self.thin == 0)]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> 'ChainConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown chain settings: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass(frozen=True)
class SweepPlan:
    steps: tuple = DEFAULT_STEPS

    def __post_init__(self):
        steps = tuple(self.steps)
        if sorted(steps) != sorted(DEFAULT_STEPS):
            raise ValueError(f"a sweep must run each of {', '.join(DEFAULT_STEPS)} exactly once")
        object.__setattr__(self, 'steps', steps)


# ---------------------------------------------------------------------------
# Gaussian helpers
# ---------------------------------------------------------------------------

def gaussian_moments(precision, linear):
    """Mean and covariance of the Gaussian with the given canonical parameters"""
    precision = np.atleast_2d(np.asarray(precision, dtype=float))
    try:
        factor = scipy.linalg.cho_factor(precision, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError("posterior precision is not positive definite") from exc
    mean = scipy.linalg.cho_solve(factor, np.asarray(linear, dtype=float))
    cov = scipy.linalg.cho_solve(factor, np.eye(precision.shape[0]))
    return mean, cov


def draw_gaussian(precision, linear, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(P^-1 b, P^-1), batched over leading axes"""
    precision = np.asarray(precision, dtype=float)
    linear = np.asarray(linear, dtype=float)
    try:
        chol = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError as exc:
        raise NumericError("posterior precision is not positive definite") from exc
    eps = rng.standard_normal(linear.shape)
    if precision.ndim == 2:
        mean = scipy.linalg.cho_solve((chol, True), linear)
        return mean + scipy.linalg.solve_triangular(chol, eps, lower=True, trans='T')
    mean = np.linalg.solve(precision, linear[..., None])[..., 0]
    noise = np.linalg.solve(np.swapaxes(chol, -1, -2), eps[..., None])[..., 0]
    return mean + noise


def draw_inverse_gamma(shape, scale, rng: np.random.Generator):
    draw = invgamma.rvs(shape, scale=scale, random_state=rng)
    return float(draw) if np.ndim(draw) == 0 else np.asarray(draw, dtype=float)


def indicator_probability(loglik_1, loglik_0, p: float):
    """P(indicator = 1) from the two log-likelihoods and the prior inclusion rate"""
    return expit(logit(p) + np.asarray(loglik_1) - np.asarray(loglik_0))


def _mediator_effects(state: ModelState) -> np.ndarray:
    return np.asarray(state.beta_m) * np.asarray(state.tau)


def _exposure_effects(state: ModelState) -> np.ndarray:
    return np.asarray(state.alpha_z) * np.asarray(state.gamma)


def outcome_residuals(state: ModelState, data: ModelData) -> np.ndarray:
    return data.y - data.X @ state.beta_x - state.M @ _mediator_effects(state) - data.z * state.beta_z


def mediator_residuals(state: ModelState, data: ModelData) -> np.ndarray:
    return state.M - data.X @ state.alpha_x.T - np.outer(data.z, _exposure_effects(state))


def mediator_means(state: ModelState, data: ModelData) -> np.ndarray:
    return data.X @ state.alpha_x.T + np.outer(data.z, _exposure_effects(state))


# ---------------------------------------------------------------------------
# Regression coefficients
# ---------------------------------------------------------------------------

def beta_m_conditional(state: ModelState, data: ModelData):
    """Canonical parameters of the selected mediator coefficients

    Returns (selected mask, precision, linear term).
    """
    selected = np.asarray(state.tau) == 1
    M1 = state.M[:, selected]
    resid = data.y - data.X @ state.beta_x - data.z * state.beta_z
    precision = M1.T @ M1 / state.sigma2_1 + np.eye(M1.shape[1]) / state.sigma2_my
    linear = M1.T @ resid / state.sigma2_1
    return selected, precision, linear


def update_beta_m(state: ModelState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator) -> np.ndarray:
    selected, precision, linear = beta_m_conditional(state, data)
    beta_m = rng.normal(0.0, math.sqrt(state.sigma2_my), size=len(selected))
    if selected.any():
        beta_m[selected] = draw_gaussian(precision, linear, rng)
    return beta_m


def alpha_z_conditional(state: ModelState, data: ModelData):
    """Per-pair precision and linear terms of alpha_z given gamma = 1"""
    resid = state.M - data.X @ state.alpha_x.T
    precision = np.full(resid.shape[1], data.z @ data.z / state.sigma2_2 + 1.0 / state.sigma2_zm)
    linear = data.z @ resid / state.sigma2_2
    return precision, linear


def update_alpha_z(state: ModelState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator) -> np.ndarray:
    precision, linear = alpha_z_conditional(state, data)
    selected = np.asarray(state.gamma) == 1
    alpha_z = rng.normal(0.0, math.sqrt(state.sigma2_zm), size=len(selected))
    n_sel = int(selected.sum())
    if n_sel:
        prec = precision[selected]
        alpha_z[selected] = linear[selected] / prec + rng.standard_normal(n_sel) / np.sqrt(prec)
    return alpha_z


def nuisance_conditional(state: ModelState, data: ModelData, hyper: Hyperparams):
    """Canonical parameters for beta_x and for every alpha_x row (shared precision)"""
    XtX = data.X.T @ data.X
    eye = np.eye(data.X.shape[1])
    resid_y = data.y - state.M @ _mediator_effects(state) - data.z * state.beta_z
    prec_bx = XtX / state.sigma2_1 + eye / hyper.sigma2_xy
    lin_bx = data.X.T @ resid_y / state.sigma2_1
    resid_m = state.M - np.outer(data.z, _exposure_effects(state))
    prec_ax = XtX / state.sigma2_2 + eye / hyper.sigma2_xm
    lin_ax = data.X.T @ resid_m / state.sigma2_2
    return (prec_bx, lin_bx), (prec_ax, lin_ax)


def update_nuisance(state: ModelState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator):
    (prec_bx, lin_bx), (prec_ax, lin_ax) = nuisance_conditional(state, data, hyper)
    beta_x = draw_gaussian(prec_bx, lin_bx, rng)
    alpha_x = draw_gaussian(prec_ax, lin_ax, rng).T
    return beta_x, np.ascontiguousarray(alpha_x)


def beta_z_conditional(state: ModelState, data: ModelData, hyper: Hyperparams):
    resid = data.y - data.X @ state.beta_x - state.M @ _mediator_effects(state)
    precision = data.z @ data.z / state.sigma2_1 + 1.0 / hyper.sigma2_zy
    linear = data.z @ resid / state.sigma2_1
    return precision, linear


def update_beta_z(state: ModelState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator) -> float:
    precision, linear = beta_z_conditional(state, data, hyper)
    return float(linear / precision + rng.standard_normal() / math.sqrt(precision))


# ---------------------------------------------------------------------------
# Selection indicators
# ---------------------------------------------------------------------------

def tau_inclusion_probability(state: ModelState, data: ModelData, hyper: Hyperparams, d: int) -> float:
    """Full-conditional P(tau_d = 1) with every other indicator held fixed"""
    tau_0 = np.array(state.tau, copy=True)
    tau_0[d] = 0
    base = data.y - data.X @ state.beta_x - data.z * state.beta_z - state.M @ (state.beta_m * tau_0)
    contrib = state.M[:, d] * state.beta_m[d]
    resid_1 = base - contrib
    return float(indicator_probability(-(resid_1 @ resid_1) / (2 * state.sigma2_1),
                                       -(base @ base) / (2 * state.sigma2_1), hyper.p_tau))


def update_tau(state: ModelState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator) -> np.ndarray:
    tau = np.array(state.tau, dtype=np.int8, copy=True)
    base = data.y - data.X @ state.beta_x - data.z * state.beta_z
    fit = state.M @ (state.beta_m * tau)
    prior = logit(hyper.p_tau)
    for d in range(len(tau)):
        contrib = state.M[:, d] * state.beta_m[d]
        resid_0 = base - (fit - tau[d] * contrib)
        # ||r0 - c||^2 - ||r0||^2 = c.c - 2 c.r0
        delta = -(contrib @ contrib - 2.0 * contrib @ resid_0) / (2.0 * state.sigma2_1)
        new = int(rng.random() < expit(prior + delta))
        if new != tau[d]:
            fit += (new - tau[d]) * contrib
            tau[d] = new
    return tau


def gamma_inclusion_probabilities(state: ModelState, data: ModelData, hyper: Hyperparams) -> np.ndarray:
    """Full-conditional P(gamma_d = 1) for every pair

    The mediator regressions are independent across pairs, so the
    conditionals do not interact.
    """
    resid_0 = state.M - data.X @ state.alpha_x.T
    contrib = np.outer(data.z, state.alpha_z)
    delta = -((contrib ** 2).sum(axis=0) - 2.0 * (contrib * resid_0).sum(axis=0)) / (2.0 * state.sigma2_2)
    return expit(logit(hyper.p_gamma) + delta)


def update_gamma(state: ModelState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator) -> np.ndarray:
    prob = gamma_inclusion_probabilities(state, data, hyper)
    return (rng.random(len(prob)) < prob).astype(np.int8)


# ---------------------------------------------------------------------------
# Latent mediators
# ---------------------------------------------------------------------------

def measurement_sums(state: ModelState, data: ModelData) -> np.ndarray:
    sums = np.zeros_like(state.M)
    np.add.at(sums, data.meas_subject, state.m_meas)
    return sums


def latent_M_conditional(state: ModelState, data: ModelData):
    """Per-subject precision (N, D, D) and linear term (N, D) of M_i

    Three Gaussian sources: the outcome regression, the K_i measurement-level
    means and the mediator regression prior.
    """
    bt = _mediator_effects(state)
    resid = data.y - data.X @ state.beta_x - data.z * state.beta_z
    diag = data.K[:, None] / state.omega2_qr[None, :] + 1.0 / state.sigma2_2
    precision = np.broadcast_to(np.outer(bt, bt) / state.sigma2_1, (data.N, len(bt), len(bt))).copy()
    idx = np.arange(len(bt))
    precision[:, idx, idx] += diag
    linear = (np.outer(resid, bt) / state.sigma2_1
              + measurement_sums(state, data) / state.omega2_qr[None, :]
              + mediator_means(state, data) / state.sigma2_2)
    return precision, linear


def update_latent_M(state: ModelState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator) -> np.ndarray:
    precision, linear = latent_M_conditional(state, data)
    return draw_gaussian(precision, linear, rng)


def m_meas_conditional(state: ModelState, data: ModelData):
    """Per-measurement mean (S, D) and variance (D,) of m_ik given edges and M"""
    stats = edge_pair_stats(data, state.allocation.labels, state.Q)
    precision = stats.n / state.sigma2_qr + 1.0 / state.omega2_qr
    linear = stats.sums / state.sigma2_qr[None, :] + state.M[data.meas_subject] / state.omega2_qr[None, :]
    return linear / precision[None, :], 1.0 / precision


def update_m_meas(state: ModelState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator) -> np.ndarray:
    mean, var = m_meas_conditional(state, data)
    return mean + rng.standard_normal(mean.shape) * np.sqrt(var)[None, :]


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------

class _AllocationTerms:
    """Edge log-likelihood of one node against every candidate block"""

    def __init__(self, state: ModelState, data: ModelData):
        lookup = pair_lookup(state.Q)
        s2 = state.sigma2_qr[lookup]
        self.A = data.A
        self.Asq = (data.A ** 2).sum(axis=0)
        self.Mq = state.m_meas[:, lookup]
        self.inv_s2 = 1.0 / s2
        self.log_norm = data.S * (LOG_2PI + np.log(s2))
        self.msq = (self.Mq ** 2).sum(axis=0)

    def node_loglik(self, v: int, Z_other: np.ndarray) -> np.ndarray:
        """Z_other: one-hot labels with row v zeroed"""
        n_r = Z_other.sum(axis=0)
        S1 = self.A[:, v, :] @ Z_other
        T2 = self.Asq[v] @ Z_other
        cross = np.einsum('sqr,sr->qr', self.Mq, S1)
        terms = (-0.5 * n_r * self.log_norm - 0.5 * T2 * self.inv_s2
                 + cross * self.inv_s2 - 0.5 * n_r * self.msq * self.inv_s2)
        return terms.sum(axis=1)


def _log_prior(pi: np.ndarray) -> np.ndarray:
    with np.errstate(divide='ignore'):
        return np.log(pi)


def allocation_conditional(state: ModelState, data: ModelData, v: int) -> np.ndarray:
    """Full-conditional label probabilities of node v given all other labels"""
    Z = state.allocation.onehot()
    Z[v] = 0.0
    logw = _log_prior(state.pi) + _AllocationTerms(state, data).node_loglik(v, Z)
    return np.exp(logw - logsumexp(logw))


def update_allocation(state: ModelState, data: ModelData, hyper: Hyperparams,
                      rng: np.random.Generator) -> Allocation:
    Q = state.Q
    terms = _AllocationTerms(state, data)
    log_pi = _log_prior(state.pi)
    labels = state.allocation.labels.copy()
    Z = np.eye(Q)[labels]
    for v in range(len(labels)):
        Z[v] = 0.0
        logw = log_pi + terms.node_loglik(v, Z)
        cdf = np.cumsum(np.exp(logw - logsumexp(logw)))
        labels[v] = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side='right')), Q - 1)
        Z[v, labels[v]] = 1.0
    return Allocation(labels, Q)


def update_pi(state: ModelState, hyper: Hyperparams, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(hyper.concentration(state.Q) + state.allocation.counts())


# ---------------------------------------------------------------------------
# Variances
# ---------------------------------------------------------------------------

VARIANCE_ORDER = ('sigma2_1', 'sigma2_2', 'omega2_qr', 'sigma2_qr', 'sigma2_zm', 'sigma2_my')


def variance_posteriors(state: ModelState, data: ModelData, hyper: Hyperparams) -> dict:
    """Inverse-gamma (shape, scale) of every variance's full conditional"""
    a0, b0 = hyper.ig_noninf_shape, hyper.ig_noninf_scale
    e1 = outcome_residuals(state, data)
    e2 = mediator_residuals(state, data)
    dev = state.m_meas - state.M[data.meas_subject]
    stats = edge_pair_stats(data, state.allocation.labels, state.Q)
    m = state.m_meas
    edge_ssr = (stats.sumsq - 2.0 * m * stats.sums + stats.n[None, :] * m ** 2).sum(axis=0)
    D = len(state.sigma2_qr)
    return {
        'sigma2_1': (a0 + data.N / 2.0, b0 + e1 @ e1 / 2.0),
        'sigma2_2': (a0 + e2.size / 2.0, b0 + (e2 ** 2).sum() / 2.0),
        'omega2_qr': (np.full(D, hyper.a2 + data.S / 2.0), hyper.b2 + (dev ** 2).sum(axis=0) / 2.0),
        'sigma2_qr': (hyper.a1 + data.S * stats.n / 2.0, hyper.b1 + np.maximum(edge_ssr, 0.0) / 2.0),
        'sigma2_zm': (a0 + D / 2.0, b0 + state.alpha_z @ state.alpha_z / 2.0),
        'sigma2_my': (a0 + D / 2.0, b0 + state.beta_m @ state.beta_m / 2.0),
    }


def update_variances(state: ModelState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator) -> dict:
    post = variance_posteriors(state, data, hyper)
    return {name: draw_inverse_gamma(*post[name], rng) for name in VARIANCE_ORDER}


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

def _step_indicators(state, data, hyper, rng):
    state.tau = update_tau(state, data, hyper, rng)
    state.gamma = update_gamma(state, data, hyper, rng)


def _step_nuisance(state, data, hyper, rng):
    state.beta_x, state.alpha_x = update_nuisance(state, data, hyper, rng)


def _step_latent(state, data, hyper, rng):
    state.M = update_latent_M(state, data, hyper, rng)
    state.m_meas = update_m_meas(state, data, hyper, rng)


def _step_allocation(state, data, hyper, rng):
    state.allocation = update_allocation(state, data, hyper, rng)
    state.pi = update_pi(state, hyper, rng)


def _step_variances(state, data, hyper, rng):
    for name, value in update_variances(state, data, hyper, rng).items():
        setattr(state, name, value)


STEPS = {
    'beta_m': lambda s, d, h, r: setattr(s, 'beta_m', update_beta_m(s, d, h, r)),
    'alpha_z': lambda s, d, h, r: setattr(s, 'alpha_z', update_alpha_z(s, d, h, r)),
    'indicators': _step_indicators,
    'nuisance': _step_nuisance,
    'beta_z': lambda s, d, h, r: setattr(s, 'beta_z', update_beta_z(s, d, h, r)),
    'latent': _step_latent,
    'allocation': _step_allocation,
    'variances': _step_variances,
}


def sweep(state: ModelState, data: ModelData, hyper: Hyperparams, rng: np.random.Generator,
          plan: SweepPlan = SweepPlan()) -> ModelState:
    """Run one full Gibbs sweep in place and return the state"""
    for step in plan.steps:
        STEPS[step](state, data, hyper, rng)
    return state


def _check_finite(state: ModelState, iteration: int) -> None:
    for name in ('beta_z', 'sigma2_1', 'sigma2_2', 'sigma2_zm', 'sigma2_my', 'M', 'm_meas',
                 'beta_m', 'alpha_z', 'beta_x', 'alpha_x', 'sigma2_qr', 'omega2_qr', 'pi'):
        if not np.all(np.isfinite(getattr(state, name))):
            raise NumericError(f"non-finite {name} at iteration {iteration}")


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def sample_prior_state(X: np.ndarray, z: np.ndarray, meas_subject: np.ndarray, V: int, Q: int,
                       hyper: Hyperparams, rng: np.random.Generator) -> ModelState:
    """Draw every unknown from its prior (mediators from their regressions)"""
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float)
    meas_subject = np.asarray(meas_subject, dtype=np.intp)
    D = n_pairs(Q)
    a0, b0 = hyper.ig_noninf_shape, hyper.ig_noninf_scale

    pi = rng.dirichlet(hyper.concentration(Q))
    labels = rng.choice(Q, size=V, p=pi)
    sigma2_qr = draw_inverse_gamma(hyper.a1, np.full(D, hyper.b1), rng)
    omega2_qr = draw_inverse_gamma(hyper.a2, np.full(D, hyper.b2), rng)
    sigma2_1, sigma2_2, sigma2_zm, sigma2_my = (draw_inverse_gamma(a0, b0, rng) for _ in range(4))

    beta_x = rng.normal(0.0, math.sqrt(hyper.sigma2_xy), size=X.shape[1])
    beta_z = float(rng.normal(0.0, math.sqrt(hyper.sigma2_zy)))
    beta_m = rng.normal(0.0, math.sqrt(sigma2_my), size=D)
    alpha_x = rng.normal(0.0, math.sqrt(hyper.sigma2_xm), size=(D, X.shape[1]))
    alpha_z = rng.normal(0.0, math.sqrt(sigma2_zm), size=D)
    tau = (rng.random(D) < hyper.p_tau).astype(np.int8)
    gamma = (rng.random(D) < hyper.p_gamma).astype(np.int8)

    M = X @ alpha_x.T + np.outer(z, alpha_z * gamma) + rng.standard_normal((len(z), D)) * math.sqrt(sigma2_2)
    m_meas = M[meas_subject] + rng.standard_normal((len(meas_subject), D)) * np.sqrt(omega2_qr)

    return ModelState(allocation=Allocation(labels, Q), pi=pi, M=M, m_meas=m_meas,
                      sigma2_qr=sigma2_qr, omega2_qr=omega2_qr, beta_x=beta_x, beta_m=beta_m,
                      beta_z=beta_z, alpha_x=alpha_x, alpha_z=alpha_z, tau=tau, gamma=gamma,
                      sigma2_1=sigma2_1, sigma2_2=sigma2_2, sigma2_zm=sigma2_zm, sigma2_my=sigma2_my)


def _positive_or(value: float, fallback: float) -> float:
    return value if math.isfinite(value) and value > 0 else fallback


def block_average_state(data: ModelData, Q: int, hyper: Hyperparams, seed: int) -> ModelState:
    """Start from the pooled SBM clustering and empirical block averages"""
    fit = fit_pooled_sbm(data, Q, seed)
    alloc = fit.allocation
    averages = block_averages(data, alloc)
    D = n_pairs(Q)

    m_meas = averages.m_meas
    sums = np.zeros((data.N, D))
    np.add.at(sums, data.meas_subject, m_meas)
    M = sums / data.K[:, None]
    dev = m_meas - M[data.meas_subject]
    omega2 = (dev ** 2).mean(axis=0)
    omega2 = np.where(omega2 > 0, omega2, hyper.b2 / (hyper.a2 + 1.0))

    conc = hyper.concentration(Q)
    pi = (alloc.counts() + conc) / (alloc.V + conc.sum())
    sigma2_2 = _positive_or(float((M - M.mean(axis=0)).var()), 1.0)

    return ModelState(allocation=alloc, pi=pi, M=M, m_meas=m_meas,
                      sigma2_qr=averages.sigma2_qr, omega2_qr=omega2,
                      beta_x=np.zeros(data.X.shape[1]), beta_m=np.zeros(D), beta_z=0.0,
                      alpha_x=np.zeros((D, data.X.shape[1])), alpha_z=np.zeros(D),
                      tau=np.ones(D, dtype=np.int8), gamma=np.ones(D, dtype=np.int8),
                      sigma2_1=_positive_or(float(data.y.var()), 1.0), sigma2_2=sigma2_2,
                      sigma2_zm=1.0, sigma2_my=1.0)


def initialize_state(data: ModelData, Q: int, hyper: Hyperparams, rng: np.random.Generator,
                     mode: str = 'block-average', seed: int = 0, init_state: ModelState = None) -> ModelState:
    if init_state is not None or mode == 'truth':
        if init_state is None:
            raise ValueError("init_mode 'truth' needs an initial state")
        if init_state.Q != Q:
            raise ValueError(f"initial state has Q={init_state.Q}, chain expects Q={Q}")
        return init_state.copy()
    if mode == 'random':
        return sample_prior_state(data.X, data.z, data.meas_subject, data.V, Q, hyper, rng)
    if mode == 'block-average':
        return block_average_state(data, Q, hyper, seed)
    raise ValueError(f"unknown init_mode {mode!r}")


# ---------------------------------------------------------------------------
# Chains
# ---------------------------------------------------------------------------

def _record(store: dict, row: int, it: int, state: ModelState, contrast: tuple) -> None:
    eff = effects_from_arrays(state.beta_z, state.alpha_z, state.gamma, state.beta_m, state.tau, *contrast)
    store['iteration'][row] = it
    for name in ('beta_z', 'sigma2_1', 'sigma2_2', 'sigma2_zm', 'sigma2_my'):
        store[name][row] = getattr(state, name)
    for name in ('beta_x', 'beta_m', 'alpha_z', 'tau', 'gamma', 'omega2_qr', 'sigma2_qr', 'pi'):
        store[name][row] = getattr(state, name)
    store['labels'][row] = state.allocation.labels
    for name in ('nde', 'nie', 'te', 'nie_pos', 'nie_neg'):
        store[name][row] = getattr(eff, name)


def _empty_store(n: int, data: ModelData, Q: int) -> dict:
    D = n_pairs(Q)
    store = {'iteration': np.zeros(n, dtype=np.int64)}
    for name in ('beta_z', 'sigma2_1', 'sigma2_2', 'sigma2_zm', 'sigma2_my', 'nde', 'nie', 'te', 'nie_pos', 'nie_neg'):
        store[name] = np.zeros(n)
    store['beta_x'] = np.zeros((n, data.X.shape[1]))
    for name in ('beta_m', 'alpha_z', 'omega2_qr', 'sigma2_qr'):
        store[name] = np.zeros((n, D))
    store['tau'] = np.zeros((n, D), dtype=np.int8)
    store['gamma'] = np.zeros((n, D), dtype=np.int8)
    store['pi'] = np.zeros((n, Q))
    store['labels'] = np.zeros((n, data.V), dtype=np.int64)
    return store


def run_chain(dataset, config: ChainConfig, hyper: Hyperparams = None, chain_index: int = 0,
              init_state: ModelState = None, contrast: tuple = None, plan: SweepPlan = SweepPlan(),
              verbose: bool = False, progress_every: int = PROGRESS_EVERY) -> PosteriorDraws:
    """Run one chain with seed config.seed + chain_index"""
    if config.Q is None:
        raise ValueError("ChainConfig.Q must be set before sampling")
    hyper = hyper or Hyperparams()
    data = as_model_data(dataset)
    seed = int(config.seed) + int(chain_index)
    rng = np.random.default_rng(seed)
    contrast = tuple(contrast) if contrast is not None else default_contrast(data.z)

    state = initialize_state(data, config.Q, hyper, rng, mode=config.init_mode, seed=seed, init_state=init_state)
    stored = set(config.stored_iterations().tolist())
    store = _empty_store(len(stored), data, config.Q)

    started = time.time()
    row = 0
    for it in range(1, config.n_iter + 1):
        try:
            sweep(state, data, hyper, rng, plan)
        except NumericError as exc:
            raise NumericError(f"chain {chain_index}, iteration {it}: {exc}") from exc
        _check_finite(state, it)
        if it in stored:
            _record(store, row, it, state, contrast)
            row += 1
        if verbose and progress_every and it % progress_every == 0:
            print(f"🔄 chain {chain_index}: {it}/{config.n_iter} sweeps ({time.time() - started:.1f}s)")

    if verbose:
        print(f"✅ chain {chain_index} done: {row} draws stored in {time.time() - started:.1f}s")
    return PosteriorDraws(chains=[store], n_iter=config.n_iter, burn_in=config.burn_in, thin=config.thin,
                          seeds=[seed], Q=config.Q, V=data.V, contrast=contrast, raw=config.raw,
                          meta={'init_mode': config.init_mode, 'seconds': [time.time() - started]})


def _run_one(args):
    data, config, hyper, chain_index, init_state, contrast, verbose, progress_every = args
    return run_chain(data, config, hyper, chain_index=chain_index, init_state=init_state,
                     contrast=contrast, verbose=verbose, progress_every=progress_every)


def run_chains(dataset, config: ChainConfig, hyper: Hyperparams = None, n_jobs: int = 1,
               init_state: ModelState = None, contrast: tuple = None, verbose: bool = False,
               progress_every: int = PROGRESS_EVERY) -> PosteriorDraws:
    """Independent chains with seeds seed + chain index, merged in chain order"""
    data = as_model_data(dataset)
    hyper = hyper or Hyperparams()
    jobs = [(data, config, hyper, c, init_state, contrast, verbose, progress_every)
            for c in range(config.n_chains)]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(_run_one, jobs))
    else:
        parts = [_run_one(job) for job in jobs]
    merged = PosteriorDraws.merge(parts)
    merged.meta['seconds'] = [s for part in parts for s in part.meta['seconds']]
    return merged
