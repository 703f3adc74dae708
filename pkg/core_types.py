#!/usr/bin/env python3
"""
Core Types
Observed data, latent state and prior constants of the Bayesian network mediation model.

Block ids are 1..Q on every user-facing surface; label arrays are stored 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

ASYMMETRY_TOLERANCE = 1e-8


class BnmmError(Exception):
    """Base class for all model errors"""


class DataError(BnmmError, ValueError):
    """Invalid or unreadable input data"""


class SchemaError(DataError):
    """File written by a newer, incompatible schema"""


class NumericError(BnmmError, ArithmeticError):
    """Numerical failure while sampling"""


# ---------------------------------------------------------------------------
# Block-pair indexing
# ---------------------------------------------------------------------------

def n_pairs(Q: int) -> int:
    """Number of unordered block pairs q <= r"""
    return Q * (Q + 1) // 2


def pair_index(q: int, r: int, Q: int) -> int:
    """Flat 0-based index of the unordered pair of 1-based block ids (q, r)"""
    if not (1 <= q <= Q and 1 <= r <= Q):
        raise ValueError(f"block ids must lie in 1..{Q}, got ({q}, {r})")
    if q > r:
        q, r = r, q
    # row-major upper triangle
    return (q - 1) * Q - (q - 1) * (q - 2) // 2 + (r - q)


def pair_lookup(Q: int) -> np.ndarray:
    """Q x Q matrix of flat pair indices for 0-based labels"""
    lookup = np.empty((Q, Q), dtype=np.intp)
    for q in range(Q):
        for r in range(q, Q):
            lookup[q, r] = lookup[r, q] = pair_index(q + 1, r + 1, Q)
    return lookup


def pair_blocks(Q: int) -> tuple[np.ndarray, np.ndarray]:
    """0-based (q, r) arrays, one entry per flat pair index"""
    qs, rs = np.triu_indices(Q)
    return qs.astype(np.intp), rs.astype(np.intp)


def permute_pair_order(perm: np.ndarray, Q: int) -> np.ndarray:
    """Flat index map under a block relabelling old q -> perm[q]

    Returned array `dest` satisfies new_values[dest] = old_values.
    """
    perm = np.asarray(perm, dtype=np.intp)
    lookup = pair_lookup(Q)
    qs, rs = pair_blocks(Q)
    return lookup[perm[qs], perm[rs]]


@dataclass(frozen=True)
class BlockPairTable:
    """Symmetric table over unordered block pairs, stored flat"""
    values: np.ndarray
    Q: int

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != (n_pairs(self.Q),):
            raise ValueError(f"expected {n_pairs(self.Q)} values for Q={self.Q}, got shape {values.shape}")
        object.__setattr__(self, 'values', values)

    def value(self, q: int, r: int):
        return self.values[pair_index(q, r, self.Q)]

    def to_matrix(self) -> np.ndarray:
        return self.values[pair_lookup(self.Q)]

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> 'BlockPairTable':
        matrix = np.asarray(matrix)
        Q = matrix.shape[0]
        qs, rs = pair_blocks(Q)
        return cls(matrix[qs, rs].copy(), Q)

    def permuted(self, perm: np.ndarray) -> 'BlockPairTable':
        out = np.empty_like(self.values)
        out[permute_pair_order(perm, self.Q)] = self.values
        return BlockPairTable(out, self.Q)

    def pairs(self):
        """Yield ((q, r), value) with 1-based ids in flat order"""
        qs, rs = pair_blocks(self.Q)
        for d in range(len(self.values)):
            yield (int(qs[d]) + 1, int(rs[d]) + 1), self.values[d]


# ---------------------------------------------------------------------------
# Observed data
# ---------------------------------------------------------------------------

@dataclass
class SubjectRecord:
    outcome: float
    exposure: float
    covariates: np.ndarray
    connectomes: list

    @property
    def n_measurements(self) -> int:
        return len(self.connectomes)


@dataclass
class Dataset:
    subjects: list
    V: int
    P: int

    @property
    def N(self) -> int:
        return len(self.subjects)

    @property
    def outcomes(self) -> np.ndarray:
        return np.array([s.outcome for s in self.subjects], dtype=float)

    @property
    def exposures(self) -> np.ndarray:
        return np.array([s.exposure for s in self.subjects], dtype=float)

    @property
    def covariate_matrix(self) -> np.ndarray:
        return np.vstack([s.covariates for s in self.subjects]) if self.subjects else np.zeros((0, self.P + 1))

    @property
    def n_measurements(self) -> np.ndarray:
        return np.array([s.n_measurements for s in self.subjects], dtype=int)


def validate_dataset(raw: Dataset, tolerance: float = ASYMMETRY_TOLERANCE) -> Dataset:
    """Check a dataset and return a cleaned copy

    Connectomes are symmetrized by averaging when their asymmetry is within
    `tolerance`; covariate vectors of length P get the intercept prepended.
    """
    V, P = int(raw.V), int(raw.P)
    if V < 1:
        raise DataError(f"node count V must be positive, got {V}")
    if P < 0:
        raise DataError(f"covariate count P must be non-negative, got {P}")

    cleaned = []
    for i, subject in enumerate(raw.subjects):
        outcome = float(subject.outcome)
        exposure = float(subject.exposure)
        if not math.isfinite(outcome):
            raise DataError(f"subject {i}: outcome is not finite")
        if not math.isfinite(exposure):
            raise DataError(f"subject {i}: exposure is not finite")

        covariates = np.asarray(subject.covariates, dtype=float).ravel()
        if covariates.shape == (P,):
            covariates = np.concatenate([[1.0], covariates])
        if covariates.shape != (P + 1,):
            raise DataError(f"subject {i}: covariate vector has length {covariates.size}, expected {P + 1}")
        if covariates[0] != 1.0:
            raise DataError(f"subject {i}: first covariate must be the intercept 1, got {covariates[0]}")
        if not np.all(np.isfinite(covariates)):
            raise DataError(f"subject {i}: covariates contain non-finite values")

        if len(subject.connectomes) == 0:
            raise DataError(f"subject {i}: no connectomes (K_i = 0)")
        matrices = []
        for k, a in enumerate(subject.connectomes):
            a = np.array(a, dtype=float)
            if a.shape != (V, V):
                raise DataError(f"subject {i}, connectome {k}: shape {a.shape}, expected ({V}, {V})")
            if not np.all(np.isfinite(a)):
                raise DataError(f"subject {i}, connectome {k}: non-finite entries")
            asymmetry = np.max(np.abs(a - a.T)) if V > 1 else 0.0
            if asymmetry > tolerance:
                raise DataError(
                    f"subject {i}, connectome {k}: asymmetry above tolerance ({asymmetry:.3g} > {tolerance:g})"
                )
            if asymmetry > 0:
                a = 0.5 * (a + a.T)
            matrices.append(a)

        cleaned.append(SubjectRecord(outcome, exposure, covariates, matrices))

    return Dataset(subjects=cleaned, V=V, P=P)


def standardize_covariates(dataset: Dataset) -> Dataset:
    """Center and scale every non-intercept covariate column"""
    X = dataset.covariate_matrix
    if X.shape[1] <= 1 or X.shape[0] < 2:
        return dataset
    body = X[:, 1:]
    sd = body.std(axis=0, ddof=1)
    sd[sd == 0] = 1.0
    scaled = (body - body.mean(axis=0)) / sd
    subjects = [
        SubjectRecord(s.outcome, s.exposure, np.concatenate([[1.0], scaled[i]]), s.connectomes)
        for i, s in enumerate(dataset.subjects)
    ]
    return Dataset(subjects=subjects, V=dataset.V, P=dataset.P)


@dataclass
class ModelData:
    """Stacked numeric view of a validated dataset

    Measurements of all subjects are stacked in subject order; `edges`
    holds the strict upper triangle of every connectome.
    """
    y: np.ndarray
    z: np.ndarray
    X: np.ndarray
    A: np.ndarray
    meas_subject: np.ndarray
    K: np.ndarray
    iu: tuple
    edges: np.ndarray

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def V(self) -> int:
        return self.A.shape[1]

    @property
    def S(self) -> int:
        return self.A.shape[0]

    @property
    def P(self) -> int:
        return self.X.shape[1] - 1

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> 'ModelData':
        V = dataset.V
        mats, owners = [], []
        for i, s in enumerate(dataset.subjects):
            for a in s.connectomes:
                mats.append(np.asarray(a, dtype=float))
                owners.append(i)
        A = np.stack(mats) if mats else np.zeros((0, V, V))
        return cls.from_arrays(dataset.outcomes, dataset.exposures, dataset.covariate_matrix,
                               A, np.array(owners, dtype=np.intp))

    @classmethod
    def from_arrays(cls, y, z, X, A, meas_subject) -> 'ModelData':
        A = np.asarray(A, dtype=float)
        V = A.shape[1]
        iu = np.triu_indices(V, 1)
        meas_subject = np.asarray(meas_subject, dtype=np.intp)
        N = len(y)
        return cls(
            y=np.asarray(y, dtype=float),
            z=np.asarray(z, dtype=float),
            X=np.asarray(X, dtype=float),
            A=A,
            meas_subject=meas_subject,
            K=np.bincount(meas_subject, minlength=N),
            iu=iu,
            edges=A[:, iu[0], iu[1]],
        )

    def with_observations(self, y: np.ndarray, A: np.ndarray) -> 'ModelData':
        return ModelData.from_arrays(y, self.z, self.X, A, self.meas_subject)


def as_model_data(data) -> ModelData:
    return data if isinstance(data, ModelData) else ModelData.from_dataset(data)


# ---------------------------------------------------------------------------
# Latent state
# ---------------------------------------------------------------------------

@dataclass
class Allocation:
    """Block membership of every node, labels 0-based"""
    labels: np.ndarray
    Q: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.labels.ndim != 1:
            raise ValueError("labels must be a vector")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.Q):
            raise ValueError(f"labels must lie in 0..{self.Q - 1}")

    @property
    def V(self) -> int:
        return len(self.labels)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.Q)

    def onehot(self) -> np.ndarray:
        return np.eye(self.Q)[self.labels]

    def permuted(self, perm: np.ndarray) -> 'Allocation':
        return Allocation(np.asarray(perm, dtype=np.intp)[self.labels], self.Q)

    def block_ids(self) -> np.ndarray:
        """1-based labels for reporting"""
        return self.labels + 1


_ARRAY_FIELDS = ('pi', 'M', 'm_meas', 'sigma2_qr', 'omega2_qr', 'beta_x', 'beta_m',
                 'alpha_x', 'alpha_z', 'tau', 'gamma')
_SCALAR_FIELDS = ('beta_z', 'sigma2_1', 'sigma2_2', 'sigma2_zm', 'sigma2_my')


@dataclass
class ModelState:
    """One draw of every unknown

    Shapes: pi (Q,), M (N, D), m_meas (S, D), sigma2_qr / omega2_qr / beta_m /
    alpha_z / tau / gamma (D,), beta_x (P+1,), alpha_x (D, P+1), with
    D = Q(Q+1)/2 and S the total number of measurements.
    """
    allocation: Allocation
    pi: np.ndarray
    M: np.ndarray
    m_meas: np.ndarray
    sigma2_qr: np.ndarray
    omega2_qr: np.ndarray
    beta_x: np.ndarray
    beta_m: np.ndarray
    beta_z: float
    alpha_x: np.ndarray
    alpha_z: np.ndarray
    tau: np.ndarray
    gamma: np.ndarray
    sigma2_1: float
    sigma2_2: float
    sigma2_zm: float
    sigma2_my: float

    @property
    def Q(self) -> int:
        return self.allocation.Q

    def copy(self) -> 'ModelState':
        kwargs = {name: np.array(getattr(self, name), copy=True) for name in _ARRAY_FIELDS}
        kwargs.update({name: float(getattr(self, name)) for name in _SCALAR_FIELDS})
        return ModelState(allocation=Allocation(self.allocation.labels.copy(), self.Q), **kwargs)

    def table(self, name: str) -> BlockPairTable:
        return BlockPairTable(np.asarray(getattr(self, name)), self.Q)

    def validate(self) -> None:
        """Raise NumericError when a state invariant is broken"""
        if not math.isclose(float(np.sum(self.pi)), 1.0, rel_tol=0, abs_tol=1e-8) or np.any(self.pi < 0):
            raise NumericError("pi is not a probability vector")
        for name in ('sigma2_qr', 'omega2_qr'):
            values = getattr(self, name)
            if not np.all(np.isfinite(values)) or np.any(values <= 0):
                raise NumericError(f"{name} must be finite and strictly positive")
        for name in ('sigma2_1', 'sigma2_2', 'sigma2_zm', 'sigma2_my'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise NumericError(f"{name} must be finite and strictly positive, got {value}")
        for name in ('tau', 'gamma'):
            if not np.all(np.isin(getattr(self, name), (0, 1))):
                raise NumericError(f"{name} entries must be 0 or 1")

    def permuted(self, perm: np.ndarray) -> 'ModelState':
        """Same state under the block relabelling q -> perm[q]"""
        Q = self.Q
        perm = np.asarray(perm, dtype=np.intp)
        dest = permute_pair_order(perm, Q)
        out = self.copy()
        out.allocation = self.allocation.permuted(perm)
        out.pi = np.empty_like(self.pi)
        out.pi[perm] = self.pi
        for name in ('sigma2_qr', 'omega2_qr', 'beta_m', 'alpha_z', 'tau', 'gamma'):
            values = getattr(self, name)
            moved = np.empty_like(values)
            moved[dest] = values
            setattr(out, name, moved)
        for name in ('M', 'm_meas', 'alpha_x'):
            values = np.asarray(getattr(self, name))
            moved = np.empty_like(values)
            if name == 'alpha_x':
                moved[dest] = values
            else:
                moved[:, dest] = values
            setattr(out, name, moved)
        return out

    def to_dict(self) -> dict:
        data: dict[str, Any] = {'Q': self.Q, 'labels': self.allocation.labels.tolist()}
        for name in _ARRAY_FIELDS:
            data[name] = np.asarray(getattr(self, name)).tolist()
        for name in _SCALAR_FIELDS:
            data[name] = float(getattr(self, name))
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ModelState':
        Q = int(data['Q'])
        kwargs = {}
        for name in _ARRAY_FIELDS:
            dtype = np.int8 if name in ('tau', 'gamma') else float
            kwargs[name] = np.array(data[name], dtype=dtype)
        for name in _SCALAR_FIELDS:
            kwargs[name] = float(data[name])
        D = n_pairs(Q)
        kwargs['M'] = kwargs['M'].reshape(-1, D)
        kwargs['m_meas'] = kwargs['m_meas'].reshape(-1, D)
        kwargs['alpha_x'] = kwargs['alpha_x'].reshape(D, -1)
        return cls(allocation=Allocation(np.array(data['labels'], dtype=np.intp), Q), **kwargs)


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

@dataclass
class Hyperparams:
    """Fixed prior constants"""
    p_gamma: float = 0.5
    p_tau: float = 0.5
    dirichlet_conc: Any = 1.0
    a1: float = 1.0
    b1: float = 1.0
    a2: float = 1.0
    b2: float = 1.0
    ig_noninf_shape: float = 0.1
    ig_noninf_scale: float = 0.1
    sigma2_xy: float = 10.0
    sigma2_zy: float = 10.0
    sigma2_xm: float = 10.0

    def __post_init__(self):
        for name in ('p_gamma', 'p_tau'):
            p = getattr(self, name)
            if not 0.0 < p < 1.0:
                raise ValueError(f"{name} must lie in the open unit interval, got {p}")
        for name in ('a1', 'b1', 'a2', 'b2', 'ig_noninf_shape', 'ig_noninf_scale',
                     'sigma2_xy', 'sigma2_zy', 'sigma2_xm'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be strictly positive, got {value}")
        conc = np.atleast_1d(np.asarray(self.dirichlet_conc, dtype=float))
        if np.any(conc <= 0) or not np.all(np.isfinite(conc)):
            raise ValueError("dirichlet_conc entries must be strictly positive")

    def concentration(self, Q: int) -> np.ndarray:
        conc = np.atleast_1d(np.asarray(self.dirichlet_conc, dtype=float))
        if conc.size == 1:
            return np.full(Q, conc[0])
        if conc.size != Q:
            raise ValueError(f"dirichlet_conc has {conc.size} entries, expected {Q}")
        return conc

    def to_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        conc = np.asarray(self.dirichlet_conc, dtype=float)
        data['dirichlet_conc'] = conc.tolist() if conc.ndim else float(conc)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'Hyperparams':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {', '.join(sorted(unknown))}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Posterior storage
# ---------------------------------------------------------------------------

@dataclass
class PosteriorDraws:
    """Stored draws, one dict of arrays per chain

    Every array's first axis runs over stored iterations; `iteration`
    holds the 1-based sweep number of each stored draw.
    """
    chains: list
    n_iter: int
    burn_in: int
    thin: int
    seeds: list
    Q: int
    V: int
    contrast: tuple = (1.0, 0.0)
    raw: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.chains) < 1:
            raise ValueError("at least one chain is required")

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def n_draws(self) -> int:
        return sum(len(chain['beta_z']) for chain in self.chains)

    def stack(self, name: str) -> np.ndarray:
        """Pool a quantity across chains"""
        return np.concatenate([np.asarray(chain[name]) for chain in self.chains], axis=0)

    def per_chain(self, name: str) -> np.ndarray:
        """Array of shape (chains, draws, ...) truncated to the shortest chain"""
        n = min(len(chain[name]) for chain in self.chains)
        return np.stack([np.asarray(chain[name])[:n] for chain in self.chains])

    @classmethod
    def merge(cls, parts: list) -> 'PosteriorDraws':
        first = parts[0]
        return cls(
            chains=[chain for part in parts for chain in part.chains],
            n_iter=first.n_iter,
            burn_in=first.burn_in,
            thin=first.thin,
            seeds=[seed for part in parts for seed in part.seeds],
            Q=first.Q,
            V=first.V,
            contrast=first.contrast,
            raw=first.raw,
            meta=dict(first.meta),
        )
