#!/usr/bin/env python3
"""
Mediation Effects
Natural direct, indirect and total effects from posterior draws, the
posterior median model, consensus block allocation and edge-level masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from core_types import (Allocation, BlockPairTable, ModelState, PosteriorDraws, pair_blocks, pair_lookup,
                        permute_pair_order)

THRESHOLD = 0.5
COMPONENTS = ('nde', 'nie', 'te', 'nie_pos', 'nie_neg')
PAIR_FIELDS = ('tau', 'gamma', 'alpha_z', 'beta_m', 'sigma2_qr', 'omega2_qr')


@dataclass
class EffectDraw:
    nde: float
    nie: float
    te: float
    nie_pos: float
    nie_neg: float
    contrast: tuple
    per_pair: np.ndarray = field(default=None, repr=False)


def default_contrast(exposure) -> tuple:
    """(1, 0) for a binary exposure, (mean + 1 sd, mean) otherwise"""
    z = np.asarray(exposure, dtype=float)
    if z.size and np.all(np.isin(z, (0.0, 1.0))):
        return (1.0, 0.0)
    mean = float(z.mean()) if z.size else 0.0
    sd = float(z.std(ddof=1)) if z.size > 1 else 1.0
    if sd == 0:
        sd = 1.0
    return (mean + sd, mean)


def effects_from_arrays(beta_z, alpha_z, gamma, beta_m, tau, Z: float, Z_star: float) -> EffectDraw:
    dz = float(Z) - float(Z_star)
    per_pair = dz * (np.asarray(alpha_z) * np.asarray(gamma)) * (np.asarray(beta_m) * np.asarray(tau))
    # fsum keeps the sums independent of pair order
    nie_pos = math.fsum(per_pair[per_pair > 0])
    nie_neg = math.fsum(per_pair[per_pair < 0])
    nde = float(beta_z) * dz
    nie = nie_pos + nie_neg
    return EffectDraw(nde=nde, nie=nie, te=nde + nie, nie_pos=nie_pos, nie_neg=nie_neg,
                      contrast=(float(Z), float(Z_star)), per_pair=per_pair)


def effects_from_draw(state: ModelState, Z: float, Z_star: float) -> EffectDraw:
    return effects_from_arrays(state.beta_z, state.alpha_z, state.gamma, state.beta_m, state.tau, Z, Z_star)


def effect_streams(draws: PosteriorDraws, Z: float, Z_star: float, per_chain: bool = False) -> dict:
    """Per-draw effect components as arrays (pooled, or shaped chains x draws)"""
    getter = draws.per_chain if per_chain else draws.stack
    beta_z, alpha_z, gamma = getter('beta_z'), getter('alpha_z'), getter('gamma')
    beta_m, tau = getter('beta_m'), getter('tau')
    flat = [
        effects_from_arrays(b, a, g, m, t, Z, Z_star)
        for b, a, g, m, t in zip(beta_z.reshape(-1), alpha_z.reshape(-1, alpha_z.shape[-1]),
                                  gamma.reshape(-1, gamma.shape[-1]), beta_m.reshape(-1, beta_m.shape[-1]),
                                  tau.reshape(-1, tau.shape[-1]))
    ]
    out = {name: np.array([getattr(e, name) for e in flat]).reshape(beta_z.shape) for name in COMPONENTS}
    out['per_pair'] = np.array([e.per_pair for e in flat]).reshape(beta_z.shape + (alpha_z.shape[-1],))
    return out


# ---------------------------------------------------------------------------
# Posterior median model
# ---------------------------------------------------------------------------

@dataclass
class ActiveSet:
    active_pairs: list
    inclusion_tau: BlockPairTable
    inclusion_gamma: BlockPairTable


def posterior_median_model(draws: PosteriorDraws, threshold: float = THRESHOLD) -> ActiveSet:
    """Pairs whose tau and gamma inclusion probabilities both reach the threshold

    Inclusion probabilities pool every stored draw of every chain, after
    relabelling each draw onto the first stored allocation.
    """
    if draws.n_draws == 0:
        raise ValueError("posterior median model needs at least one stored draw")
    draws = align_draws(draws)
    incl_tau = draws.stack('tau').mean(axis=0)
    incl_gamma = draws.stack('gamma').mean(axis=0)
    qs, rs = pair_blocks(draws.Q)
    active = [(int(qs[d]) + 1, int(rs[d]) + 1)
              for d in range(len(incl_tau))
              if incl_tau[d] >= threshold and incl_gamma[d] >= threshold]
    return ActiveSet(active, BlockPairTable(incl_tau, draws.Q), BlockPairTable(incl_gamma, draws.Q))


# ---------------------------------------------------------------------------
# Effect summaries
# ---------------------------------------------------------------------------

@dataclass
class Interval:
    mean: float
    median: float
    ci_low: float
    ci_high: float

    def to_dict(self) -> dict:
        return {'mean': self.mean, 'median': self.median, 'ci_low': self.ci_low, 'ci_high': self.ci_high}


def interval(values, level: float = 0.95) -> Interval:
    values = np.asarray(values, dtype=float)
    tail = (1.0 - level) / 2.0
    low, median, high = np.quantile(values, [tail, 0.5, 1.0 - tail])
    return Interval(float(values.mean()), float(median), float(low), float(high))


@dataclass
class PairEffect:
    pair: tuple
    mean: float
    ci_low: float
    ci_high: float
    inclusion_tau: float
    inclusion_gamma: float
    active: bool
    sign: str


@dataclass
class EffectSummary:
    components: dict
    active_pairs: list
    inclusion_probs_tau: BlockPairTable
    inclusion_probs_gamma: BlockPairTable
    contrast: tuple
    pair_effects: list = field(default_factory=list)
    n_draws: int = 0

    def to_dict(self) -> dict:
        return {
            'contrast': list(self.contrast),
            'n_draws': self.n_draws,
            **{name: self.components[name].to_dict() for name in COMPONENTS},
            'active_pairs': [list(p) for p in self.active_pairs],
            'inclusion_probs_tau': {f"{q}-{r}": float(v) for (q, r), v in self.inclusion_probs_tau.pairs()},
            'inclusion_probs_gamma': {f"{q}-{r}": float(v) for (q, r), v in self.inclusion_probs_gamma.pairs()},
            'pair_effects': [
                {'pair': list(p.pair), 'mean': p.mean, 'ci_low': p.ci_low, 'ci_high': p.ci_high,
                 'inclusion_tau': p.inclusion_tau, 'inclusion_gamma': p.inclusion_gamma,
                 'active': p.active, 'sign': p.sign}
                for p in self.pair_effects
            ],
        }


def summarize_effects(draws: PosteriorDraws, Z: float, Z_star: float, level: float = 0.95) -> EffectSummary:
    if draws.n_draws < 2:
        raise ValueError("summarizing effects needs at least two stored draws")
    draws = align_draws(draws)
    streams = effect_streams(draws, Z, Z_star)
    components = {name: interval(streams[name], level) for name in COMPONENTS}
    selection = posterior_median_model(draws)
    active = set(selection.active_pairs)

    pair_effects = []
    qs, rs = pair_blocks(draws.Q)
    for d in range(streams['per_pair'].shape[1]):
        pair = (int(qs[d]) + 1, int(rs[d]) + 1)
        summary = interval(streams['per_pair'][:, d], level)
        is_active = pair in active
        if not is_active:
            sign = 'inactive'
        else:
            sign = 'positive' if summary.mean > 0 else 'negative' if summary.mean < 0 else 'zero'
        pair_effects.append(PairEffect(pair, summary.mean, summary.ci_low, summary.ci_high,
                                       float(selection.inclusion_tau.values[d]),
                                       float(selection.inclusion_gamma.values[d]), is_active, sign))

    return EffectSummary(components=components, active_pairs=selection.active_pairs,
                         inclusion_probs_tau=selection.inclusion_tau,
                         inclusion_probs_gamma=selection.inclusion_gamma,
                         contrast=(float(Z), float(Z_star)), pair_effects=pair_effects,
                         n_draws=draws.n_draws)


# ---------------------------------------------------------------------------
# Allocation summary
# ---------------------------------------------------------------------------

def label_permutation(labels: np.ndarray, reference: np.ndarray, Q: int) -> np.ndarray:
    """perm with perm[old] = new that best matches `reference`"""
    confusion = np.zeros((Q, Q))
    np.add.at(confusion, (labels, reference), 1.0)
    rows, cols = linear_sum_assignment(-confusion)
    perm = np.empty(Q, dtype=np.intp)
    perm[rows] = cols
    return perm


def align_labels(labels: np.ndarray, reference: np.ndarray, Q: int) -> np.ndarray:
    """Relabel `labels` to agree as much as possible with `reference`"""
    labels = np.asarray(labels, dtype=np.intp)
    return label_permutation(labels, reference, Q)[labels]


def _align_chain(chain: dict, reference: np.ndarray, Q: int) -> dict:
    labels = np.asarray(chain['labels'])
    relabelled = np.empty_like(labels)
    moved = {name: np.empty_like(np.asarray(chain[name])) for name in PAIR_FIELDS if name in chain}
    pi = np.empty_like(np.asarray(chain['pi'])) if 'pi' in chain else None

    for i, row in enumerate(labels.astype(np.intp)):
        perm = label_permutation(row, reference, Q)
        relabelled[i] = perm[row]
        dest = permute_pair_order(perm, Q)
        for name, values in moved.items():
            values[i, dest] = chain[name][i]
        if pi is not None:
            pi[i, perm] = chain['pi'][i]

    out = dict(chain)
    out.update(moved)
    out['labels'] = relabelled
    if pi is not None:
        out['pi'] = pi
    return out


def align_draws(draws: PosteriorDraws) -> PosteriorDraws:
    """Relabel every stored draw onto the first stored allocation

    Block labels are only identified up to permutation, so chains started
    from different clusterings name the same blocks differently. Pair-indexed
    arrays and pi move with the labels; effects do not change.
    """
    if draws.meta.get('aligned'):
        return draws
    labelled = [c for c in draws.chains if 'labels' in c and len(c['labels'])]
    if not labelled:
        return draws
    reference = np.asarray(labelled[0]['labels'][0], dtype=np.intp)
    chains = [_align_chain(c, reference, draws.Q) if 'labels' in c else dict(c) for c in draws.chains]
    return replace(draws, chains=chains, meta={**draws.meta, 'aligned': True})


@dataclass
class AllocationSummary:
    consensus: Allocation
    frequencies: np.ndarray

    def block_sizes(self) -> dict:
        counts = self.consensus.counts()
        return {q + 1: int(counts[q]) for q in range(self.consensus.Q)}


def allocation_summary(draws: PosteriorDraws) -> AllocationSummary:
    """Modal label per node after aligning every draw to the first stored draw"""
    labels = align_draws(draws).stack('labels').astype(np.intp)
    if len(labels) == 0:
        raise ValueError("allocation summary needs at least one stored draw")
    Q = draws.Q
    freq = np.zeros((labels.shape[1], Q))
    nodes = np.arange(labels.shape[1])
    for row in labels:
        freq[nodes, row] += 1.0
    freq /= len(labels)
    return AllocationSummary(Allocation(np.argmax(freq, axis=1), Q), freq)


def edge_mask(active_pairs, alloc: Allocation) -> np.ndarray:
    """V x V 0/1 matrix marking edges whose block pair is active"""
    lookup = pair_lookup(alloc.Q)
    active = np.zeros(lookup.max() + 1, dtype=bool)
    for q, r in active_pairs:
        active[lookup[q - 1, r - 1]] = True
    mask = active[lookup[alloc.labels[:, None], alloc.labels[None, :]]].astype(np.int8)
    np.fill_diagonal(mask, 0)
    return mask
