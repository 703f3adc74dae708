#!/usr/bin/env python3
"""
Tests for effect decomposition, the posterior median model and allocation summaries
"""

import numpy as np
import pytest

from core_types import Allocation, pair_index, permute_pair_order
from effects import (align_draws, align_labels, allocation_summary, default_contrast, edge_mask, effects_from_arrays,
                     effects_from_draw, interval, posterior_median_model, summarize_effects)


def _chain(beta_z, tau, gamma, alpha_z=None, beta_m=None, labels=None):
    tau = np.asarray(tau, dtype=np.int8)
    n, D = tau.shape
    return {
        'beta_z': np.asarray(beta_z, dtype=float),
        'tau': tau,
        'gamma': np.asarray(gamma, dtype=np.int8),
        'alpha_z': np.ones((n, D)) if alpha_z is None else np.asarray(alpha_z, dtype=float),
        'beta_m': np.ones((n, D)) if beta_m is None else np.asarray(beta_m, dtype=float),
        'labels': np.zeros((n, 2), dtype=np.int64) if labels is None else np.asarray(labels),
    }


def test_direct_effect_only_when_no_pair_selected():
    eff = effects_from_arrays(1.5, np.full(3, 2.0), np.zeros(3), np.full(3, 2.0), np.ones(3), 1.0, 0.0)
    assert (eff.nde, eff.nie, eff.te) == (1.5, 0.0, 1.5)


def test_single_active_pair_indirect_effect():
    gamma = np.array([0, 1, 0])
    tau = np.array([0, 1, 0])
    eff = effects_from_arrays(1.5, np.full(3, 2.0), gamma, np.full(3, 2.0), tau, 1.0, 0.0)
    assert eff.nie == pytest.approx(4.0)
    assert eff.te == pytest.approx(5.5)
    assert eff.nie_pos == pytest.approx(4.0) and eff.nie_neg == 0.0


def test_equal_contrast_gives_zero_effects():
    eff = effects_from_arrays(1.5, np.full(3, 2.0), np.ones(3), np.full(3, 2.0), np.ones(3), 0.7, 0.7)
    assert (eff.nde, eff.nie, eff.te) == (0.0, 0.0, 0.0)


def test_decomposition_identities_hold_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        D = 6
        eff = effects_from_arrays(rng.normal(), rng.normal(size=D), rng.integers(2, size=D),
                                  rng.normal(size=D), rng.integers(2, size=D), rng.normal(), rng.normal())
        assert eff.te == eff.nde + eff.nie
        assert eff.nie == eff.nie_pos + eff.nie_neg
        assert eff.nie_pos >= 0.0 >= eff.nie_neg


def test_effects_invariant_under_block_relabelling(tiny_sim):
    _, truth = tiny_sim
    state = truth.state.copy()
    rng = np.random.default_rng(1)
    state.alpha_z = rng.normal(size=3)
    state.gamma = np.ones(3, dtype=np.int8)
    state.tau = np.ones(3, dtype=np.int8)
    perm = np.array([1, 0])
    moved = state.permuted(perm)
    a, b = effects_from_draw(state, 1.0, 0.0), effects_from_draw(moved, 1.0, 0.0)
    assert (a.nde, a.nie, a.te) == (b.nde, b.nie, b.te)

    active = [(1, 1), (1, 2)]
    moved_active = [tuple(sorted((perm[q - 1] + 1, perm[r - 1] + 1))) for q, r in active]
    assert np.array_equal(edge_mask(active, state.allocation), edge_mask(moved_active, moved.allocation))


def test_default_contrast():
    assert default_contrast([0.0, 1.0, 1.0]) == (1.0, 0.0)
    z = np.array([1.0, 2.0, 3.0])
    assert default_contrast(z) == pytest.approx((3.0, 2.0))


def test_posterior_median_model_thresholds(make_draws):
    # pair 1: 0.5 / 0.5, pair 2: 0.75 / 0.25, pair 3: 1 / 1
    tau = [[1, 1, 1], [0, 1, 1], [1, 1, 1], [0, 0, 1]]
    gamma = [[1, 0, 1], [0, 1, 1], [1, 0, 1], [0, 0, 1]]
    draws = make_draws(Q=2, chains=[_chain(np.zeros(4), tau, gamma)])
    selection = posterior_median_model(draws)
    assert selection.active_pairs == [(1, 1), (2, 2)]
    assert selection.inclusion_tau.values.tolist() == [0.5, 0.75, 1.0]
    assert selection.inclusion_gamma.value(1, 2) == 0.25


def test_posterior_median_model_pools_chains_order_free(make_draws):
    a = _chain(np.zeros(2), [[1], [1]], [[1], [0]])
    b = _chain(np.zeros(3), [[0], [0], [1]], [[1], [1], [1]])
    one = posterior_median_model(make_draws(chains=[a, b]))
    two = posterior_median_model(make_draws(chains=[b, a]))
    assert one.inclusion_tau.values.tolist() == two.inclusion_tau.values.tolist() == [0.6]
    assert one.active_pairs == two.active_pairs == [(1, 1)]


def test_posterior_median_model_needs_draws(make_draws):
    empty = _chain(np.zeros(0), np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(ValueError, match="at least one stored draw"):
        posterior_median_model(make_draws(chains=[empty]))


def test_interval_of_four_values():
    out = interval([1.0, 2.0, 3.0, 4.0])
    assert out.median == 2.5
    assert out.mean == 2.5
    constant = interval(np.full(10, 3.0))
    assert constant.ci_low == constant.ci_high == 3.0


def test_summarize_effects_components_and_pairs(make_draws):
    D = 3
    chain = _chain(beta_z=[1.0, 2.0, 3.0, 4.0], tau=np.ones((4, D)), gamma=[[1, 0, 0]] * 4,
                   alpha_z=np.full((4, D), 2.0), beta_m=np.full((4, D), -1.5))
    summary = summarize_effects(make_draws(Q=2, chains=[chain]), 1.0, 0.0)
    assert summary.components['nde'].median == 2.5
    assert summary.components['nie'].mean == pytest.approx(-3.0)
    assert summary.components['te'].mean == pytest.approx(-0.5)
    assert summary.active_pairs == [(1, 1)]
    signs = {p.pair: p.sign for p in summary.pair_effects}
    assert signs == {(1, 1): 'negative', (1, 2): 'inactive', (2, 2): 'inactive'}

    payload = summary.to_dict()
    assert payload['contrast'] == [1.0, 0.0]
    assert payload['nde']['median'] == 2.5
    assert payload['inclusion_probs_gamma'] == {'1-1': 1.0, '1-2': 0.0, '2-2': 0.0}


def test_summarize_effects_needs_two_draws(make_draws):
    chain = _chain([1.0], [[1]], [[1]])
    with pytest.raises(ValueError, match="at least two"):
        summarize_effects(make_draws(chains=[chain]), 1.0, 0.0)


def test_align_labels_undoes_a_permutation():
    reference = np.array([0, 0, 1, 2, 2, 1])
    swapped = np.array([2, 0, 1])[reference]
    assert align_labels(swapped, reference, 3).tolist() == reference.tolist()


def test_allocation_summary_aligns_to_first_draw(make_draws):
    labels = np.array([[0, 0, 1, 1], [1, 1, 0, 0], [0, 0, 1, 0]])
    chain = _chain(np.zeros(3), np.ones((3, 3)), np.ones((3, 3)), labels=labels)
    summary = allocation_summary(make_draws(Q=2, V=4, chains=[chain]))
    assert summary.consensus.labels.tolist() == [0, 0, 1, 1]
    assert summary.frequencies[3].tolist() == pytest.approx([1 / 3, 2 / 3])
    assert summary.block_sizes() == {1: 2, 2: 2}


def test_edge_mask_hand_example():
    alloc = Allocation(np.array([0, 0, 1, 1]), 2)
    mask = edge_mask([(1, 2)], alloc)
    expected = np.array([[0, 0, 1, 1],
                         [0, 0, 1, 1],
                         [1, 1, 0, 0],
                         [1, 1, 0, 0]])
    assert np.array_equal(mask, expected)
    assert not edge_mask([], alloc).any()
    full = edge_mask([(1, 1), (1, 2), (2, 2)], alloc)
    assert np.array_equal(full, 1 - np.eye(4, dtype=int))


def test_edge_mask_uses_pair_indexing():
    alloc = Allocation(np.array([0, 1, 2]), 3)
    mask = edge_mask([(3, 2)], alloc)
    assert mask[1, 2] == mask[2, 1] == 1
    assert mask.sum() == 2
    assert pair_index(3, 2, 3) == pair_index(2, 3, 3)


def _relabelled(chain, perm):
    dest = permute_pair_order(perm, 2)
    out = dict(chain)
    for name in ('tau', 'gamma', 'alpha_z', 'beta_m'):
        moved = np.empty_like(chain[name])
        moved[:, dest] = chain[name]
        out[name] = moved
    out['labels'] = np.asarray(perm)[chain['labels']]
    return out


def test_pooled_selection_matches_each_chain_under_relabelling(make_draws):
    labels = np.tile([0, 0, 1, 1], (4, 1))
    alpha_z = np.tile([2.0, 0.5, -1.0], (4, 1))
    first = _chain(np.ones(4), [[1, 0, 0]] * 4, [[1, 0, 0]] * 4, alpha_z=alpha_z, labels=labels)
    swapped = _relabelled(first, np.array([1, 0]))
    alone = summarize_effects(make_draws(Q=2, V=4, chains=[first]), 1.0, 0.0)
    pooled_draws = make_draws(Q=2, V=4, chains=[first, swapped, swapped])
    pooled = summarize_effects(pooled_draws, 1.0, 0.0)

    assert pooled.active_pairs == alone.active_pairs == [(1, 1)]
    assert pooled.inclusion_probs_tau.values.tolist() == [1.0, 0.0, 0.0]
    assert [p.mean for p in pooled.pair_effects] == pytest.approx([p.mean for p in alone.pair_effects])
    assert pooled.components['te'].mean == pytest.approx(alone.components['te'].mean)

    consensus = allocation_summary(pooled_draws).consensus
    assert consensus.labels.tolist() == [0, 0, 1, 1]
    expected = edge_mask(alone.active_pairs, allocation_summary(make_draws(Q=2, V=4, chains=[first])).consensus)
    assert np.array_equal(edge_mask(pooled.active_pairs, consensus), expected)


def test_align_draws_moves_pi_and_pair_arrays(make_draws):
    labels = np.array([[1, 1, 0, 0], [0, 0, 1, 1]])
    chain = _chain(np.zeros(2), [[0, 0, 1], [1, 0, 0]], [[0, 0, 1], [1, 0, 0]], labels=labels)
    chain['pi'] = np.array([[0.2, 0.8], [0.8, 0.2]])
    aligned = align_draws(make_draws(Q=2, V=4, chains=[chain]))
    out = aligned.chains[0]
    assert out['labels'].tolist() == [[1, 1, 0, 0], [1, 1, 0, 0]]
    assert out['tau'].tolist() == [[0, 0, 1], [0, 0, 1]]
    assert out['pi'].tolist() == [[0.2, 0.8], [0.2, 0.8]]
    assert aligned.meta['aligned'] is True
    assert align_draws(aligned) is aligned
