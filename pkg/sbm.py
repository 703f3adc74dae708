#!/usr/bin/env python3
"""
Weighted Stochastic Block Model
Gaussian edge likelihood, block-count selection by ICL and block-average summaries
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from core_types import Allocation, ModelData, as_model_data, n_pairs, pair_blocks, pair_lookup

LOG_2PI = math.log(2.0 * math.pi)
N_RESTARTS = 10
MAX_SWEEPS = 100


def edge_loglik(a, m, sigma2):
    """log N(a; m, sigma2), elementwise"""
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise ValueError("edge variance must be strictly positive")
    resid = np.asarray(a, dtype=float) - np.asarray(m, dtype=float)
    out = -0.5 * (LOG_2PI + np.log(sigma2)) - 0.5 * resid ** 2 / sigma2
    return float(out) if np.ndim(out) == 0 else out


def edge_pairs(labels: np.ndarray, iu: tuple, Q: int) -> np.ndarray:
    """Flat block-pair index of every upper-triangle edge"""
    return pair_lookup(Q)[labels[iu[0]], labels[iu[1]]]


@dataclass
class PairStats:
    """Per-pair edge counts and per-measurement sums"""
    n: np.ndarray
    sums: np.ndarray
    sumsq: np.ndarray


def edge_pair_stats(data: ModelData, labels: np.ndarray, Q: int) -> PairStats:
    pe = edge_pairs(labels, data.iu, Q)
    D = n_pairs(Q)
    H = np.zeros((len(pe), D))
    H[np.arange(len(pe)), pe] = 1.0
    return PairStats(
        n=np.bincount(pe, minlength=D).astype(float),
        sums=data.edges @ H,
        sumsq=(data.edges ** 2) @ H,
    )


def _table_values(values) -> np.ndarray:
    if hasattr(values, 'values') and not isinstance(values, np.ndarray):
        return np.asarray(values.values, dtype=float)
    if isinstance(values, (list, tuple)) and values and hasattr(values[0], 'values'):
        return np.stack([np.asarray(v.values, dtype=float) for v in values])
    return np.asarray(values, dtype=float)


def complete_loglik(dataset, alloc: Allocation, m_meas, sigma_qr) -> float:
    """Edge log-likelihood of every connectome given allocation and block parameters"""
    data = as_model_data(dataset)
    m = _table_values(m_meas)
    sigma2 = _table_values(sigma_qr)
    pe = edge_pairs(alloc.labels, data.iu, alloc.Q)
    return float(np.sum(edge_loglik(data.edges, m[:, pe], sigma2[pe])))


# ---------------------------------------------------------------------------
# Pooled Gaussian SBM and ICL
# ---------------------------------------------------------------------------

@dataclass
class IclResult:
    Q: int
    icl_score: float
    allocation: Allocation
    loglik: float = 0.0
    converged: bool = True


class PooledSbm:
    """Greedy label-swap fit of a Gaussian SBM on one averaged matrix"""

    def __init__(self, pooled: np.ndarray):
        self.A = np.array(pooled, dtype=float)
        np.fill_diagonal(self.A, 0.0)
        self.A2 = self.A ** 2
        self.V = self.A.shape[0]
        iu = np.triu_indices(self.V, 1)
        values = self.A[iu]
        self.n_edges = len(values)
        self.global_var = float(values.var()) if self.n_edges > 1 else 1.0
        if self.global_var <= 0:
            self.global_var = 1.0
        self.var_floor = 1e-12 * self.global_var

    def pair_stats(self, labels: np.ndarray, Q: int):
        Z = np.eye(Q)[labels]
        counts = Z.sum(axis=0)
        s1 = Z.T @ self.A @ Z
        s2 = Z.T @ self.A2 @ Z
        np.fill_diagonal(s1, np.diag(s1) / 2)
        np.fill_diagonal(s2, np.diag(s2) / 2)
        n = np.outer(counts, counts)
        np.fill_diagonal(n, counts * (counts - 1) / 2)
        return n, s1, s2, counts

    def edge_score(self, n, s1, s2) -> np.ndarray:
        """Plug-in Gaussian log-likelihood summed over pairs (last axis)"""
        with np.errstate(divide='ignore', invalid='ignore'):
            safe_n = np.where(n > 0, n, 1.0)
            ssr = np.maximum(s2 - s1 ** 2 / safe_n, 0.0)
            var = np.where(n >= 2, np.maximum(ssr / safe_n, self.var_floor), self.global_var)
            terms = -0.5 * n * (LOG_2PI + np.log(var)) - 0.5 * ssr / var
        return np.where(n > 0, terms, 0.0).sum(axis=-1)

    def label_score(self, counts) -> np.ndarray:
        with np.errstate(divide='ignore', invalid='ignore'):
            terms = np.where(counts > 0, counts * np.log(counts / self.V), 0.0)
        return terms.sum(axis=-1)

    def loglik(self, labels: np.ndarray, Q: int) -> float:
        n, s1, s2, counts = self.pair_stats(labels, Q)
        qs, rs = pair_blocks(Q)
        return float(self.edge_score(n[qs, rs], s1[qs, rs], s2[qs, rs]) + self.label_score(counts))

    def penalty(self, Q: int) -> float:
        # mean and variance per block pair, plus the allocation proportions
        return n_pairs(Q) * math.log(max(self.n_edges, 1)) + 0.5 * (Q - 1) * math.log(self.V)

    def icl(self, labels: np.ndarray, Q: int) -> float:
        return self.loglik(labels, Q) - self.penalty(Q)

    def greedy(self, labels: np.ndarray, Q: int, rng: np.random.Generator, max_sweeps: int = MAX_SWEEPS):
        labels = np.array(labels, dtype=np.intp)
        n, s1, s2, counts = self.pair_stats(labels, Q)
        qs, rs = pair_blocks(Q)
        ar = np.arange(Q)
        Z = np.eye(Q)[labels]

        def shifts(c):
            delta = np.zeros((Q, Q, Q))
            delta[ar, ar, :] = c
            delta[ar, :, ar] = c
            delta[ar, ar, ar] = c
            return delta

        converged = False
        for _ in range(max_sweeps):
            moved = False
            for v in rng.permutation(self.V):
                old = labels[v]
                Z[v, old] = 0.0
                c = counts.copy()
                c[old] -= 1
                dn, d1, d2 = shifts(c), shifts(self.A[v] @ Z), shifts(self.A2[v] @ Z)
                n_base, s1_base, s2_base = n - dn[old], s1 - d1[old], s2 - d2[old]
                cand_n = n_base[None] + dn
                cand_1 = s1_base[None] + d1
                cand_2 = s2_base[None] + d2
                cand_counts = c[None, :] + np.eye(Q)
                scores = (self.edge_score(cand_n[:, qs, rs], cand_1[:, qs, rs], cand_2[:, qs, rs])
                          + self.label_score(cand_counts))
                best = int(np.argmax(scores))
                if best != old and scores[best] > scores[old] + 1e-10:
                    labels[v] = best
                    moved = True
                new = labels[v]
                Z[v, new] = 1.0
                n, s1, s2 = cand_n[new], cand_1[new], cand_2[new]
                counts = cand_counts[new]
            if not moved:
                converged = True
                break
        return labels, converged


def pooled_matrix(dataset) -> np.ndarray:
    data = as_model_data(dataset)
    return data.A.mean(axis=0)


def fit_pooled_sbm(dataset, Q: int, seed: int, n_restarts: int = N_RESTARTS,
                   max_sweeps: int = MAX_SWEEPS) -> IclResult:
    """Best of `n_restarts` greedy fits for one block count"""
    model = PooledSbm(pooled_matrix(dataset))
    if not 1 <= Q <= model.V:
        raise ValueError(f"Q must lie in 1..{model.V}, got {Q}")
    best = None
    for restart in range(n_restarts):
        rng = np.random.default_rng([seed, Q, restart])
        start = rng.integers(Q, size=model.V)
        labels, converged = model.greedy(start, Q, rng, max_sweeps=max_sweeps)
        loglik = model.loglik(labels, Q)
        if best is None or loglik > best.loglik:
            best = IclResult(Q=Q, icl_score=loglik - model.penalty(Q),
                             allocation=Allocation(labels, Q), loglik=loglik, converged=converged)
    return best


def _fit_candidate(args):
    dataset, Q, seed, n_restarts = args
    return fit_pooled_sbm(dataset, Q, seed, n_restarts=n_restarts)


def select_q(dataset, q_min: int, q_max: int, seed: int, n_restarts: int = N_RESTARTS,
             n_jobs: int = 1, verbose: bool = False):
    """Score every candidate block count by ICL

    Returns (results, best_Q); results are ordered by Q.
    """
    data = as_model_data(dataset)
    if not 1 <= q_min <= q_max:
        raise ValueError(f"need 1 <= q_min <= q_max, got {q_min}..{q_max}")
    if q_max > data.V:
        raise ValueError(f"q_max={q_max} exceeds the node count V={data.V}")

    candidates = list(range(q_min, q_max + 1))
    jobs = [(data, Q, seed, n_restarts) for Q in candidates]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_fit_candidate, jobs))
    else:
        results = [_fit_candidate(job) for job in jobs]

    if verbose:
        for res in results:
            flag = "" if res.converged else " (greedy search hit the sweep limit)"
            print(f"🔄 Q={res.Q}: ICL {res.icl_score:.3f}{flag}")
    best = max(results, key=lambda res: res.icl_score)
    return results, best.Q


# ---------------------------------------------------------------------------
# Block averages
# ---------------------------------------------------------------------------

@dataclass
class BlockAverages:
    m_meas: np.ndarray
    sigma2_qr: np.ndarray
    empty_pairs: np.ndarray


def block_averages(dataset, alloc: Allocation) -> BlockAverages:
    """Empirical block means per measurement and pooled per-pair variances

    Pairs with no edges fall back to the grand mean and variance and are
    flagged in `empty_pairs`.
    """
    data = as_model_data(dataset)
    stats = edge_pair_stats(data, alloc.labels, alloc.Q)
    grand_mean = float(data.edges.mean()) if data.edges.size else 0.0
    grand_var = float(data.edges.var()) if data.edges.size > 1 else 0.0
    if grand_var <= 0:
        grand_var = 1.0

    empty = stats.n == 0
    safe_n = np.where(empty, 1.0, stats.n)
    m = np.where(empty[None, :], grand_mean, stats.sums / safe_n)

    ssr = np.maximum(stats.sumsq - stats.sums ** 2 / safe_n, 0.0).sum(axis=0)
    sigma2 = ssr / (data.S * safe_n)
    sigma2 = np.where(empty | (sigma2 <= 0), grand_var, sigma2)
    return BlockAverages(m_meas=m, sigma2_qr=sigma2, empty_pairs=empty)
