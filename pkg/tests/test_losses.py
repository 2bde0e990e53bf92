import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from riskrank import autodiff as ad
from riskrank.autodiff import Parameter, Tensor
from riskrank.data import RankingGroup
from riskrank.errors import DataError
from riskrank.losses import (
    bce_loss,
    build_pnl_gap,
    build_score_gap,
    logsoftmax_loss,
    pa_bce_full_matrix,
    pa_bce_loss,
    pairwise_label_balance,
    topk_sample,
    weighted_bce_loss,
)

from conftest import make_dataset

profits_st = arrays(np.float64, st.integers(2, 10), elements=st.floats(-1000, 1000), unique=True)


def brute_pa_bce(scores, profits):
    """Pairwise sum over every (i, j) with p_i > p_j, written without matrices."""
    total = 0.0
    for i in range(len(scores)):
        for j in range(len(scores)):
            if profits[i] > profits[j]:
                d = scores[i] - scores[j]
                total += math.log1p(profits[i] - profits[j]) * math.log1p(math.exp(-d))
    return total


# ---------------------------------------------------------------- gap matrices


def test_pnl_gap_values():
    gap, _ = build_pnl_gap(np.array([10.0, 3.0]))
    assert gap[0, 1] == gap[1, 0] == pytest.approx(math.log(8), abs=1e-12)
    assert gap[0, 1] == pytest.approx(2.079442, abs=1e-6)
    assert np.all(build_pnl_gap(np.array([5.0, 5.0]))[0] == 0.0)
    wide, _ = build_pnl_gap(np.array([460000.0, -1000000.0]))
    assert wide[0, 1] == pytest.approx(math.log(1460001), abs=1e-9)
    assert wide[0, 1] == pytest.approx(14.194, abs=1e-3)


def test_pnl_gap_sorts_by_profit():
    gap, order = build_pnl_gap(np.array([3.0, 10.0, -1.0]))
    assert order.tolist() == [1, 0, 2]
    assert gap[0, 2] == pytest.approx(math.log(12))


def test_score_gap_values():
    g = build_score_gap(np.array([2.0, 0.0]))
    assert g[0, 1] == pytest.approx(0.880797, abs=1e-6)
    assert g[1, 0] == pytest.approx(0.119203, abs=1e-6)
    assert np.all(build_score_gap(np.zeros(4))[~np.eye(4, dtype=bool)] == 0.5)


@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-20, 20)))
def test_score_gap_antisymmetric(s):
    g = build_score_gap(s)
    off = ~np.eye(len(s), dtype=bool)
    np.testing.assert_allclose((g + g.T)[off], 1.0, atol=1e-12)


# ---------------------------------------------------------------- PA-BCE


def test_single_pair_hand_value():
    loss = pa_bce_loss([(np.array([0.7, 0.7]), np.array([10.0, 3.0]))]).item()
    assert loss == pytest.approx(math.log(8) * math.log(2), abs=1e-12)
    assert loss == pytest.approx(1.441359, abs=1e-6)


def test_tied_profits_give_zero_loss_and_gradient():
    s = Parameter(np.array([3.0, -1.0, 0.5]), "s")
    loss = pa_bce_loss([(s, np.full(3, 42.0))])
    ad.backward(loss)
    assert loss.item() == 0.0
    np.testing.assert_array_equal(s.grad, 0.0)


def test_full_matrix_is_twice_upper_triangle_n6():
    rng = np.random.default_rng(5)
    s, p = rng.normal(size=6), rng.normal(0, 100, 6)
    upper = pa_bce_loss([(s, p)]).item()
    assert abs(pa_bce_full_matrix(s, p) - 2 * upper) < 1e-9


@given(profits_st, st.randoms(use_true_random=False))
def test_upper_triangle_matches_brute_force(profits, rnd):
    scores = np.array([rnd.uniform(-5, 5) for _ in profits])
    assert pa_bce_loss([(scores, profits)]).item() == pytest.approx(brute_pa_bce(scores, profits), rel=1e-12, abs=1e-12)
    assert pa_bce_full_matrix(scores, profits) == pytest.approx(2 * brute_pa_bce(scores, profits), abs=1e-9)


@given(profits_st, st.randoms(use_true_random=False))
def test_member_order_does_not_matter(profits, rnd):
    scores = np.array([rnd.uniform(-5, 5) for _ in profits])
    perm = np.array(rnd.sample(range(len(profits)), len(profits)))
    a = pa_bce_loss([(scores, profits)]).item()
    b = pa_bce_loss([(scores[perm], profits[perm])]).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@given(arrays(np.int64, st.integers(2, 10), elements=st.integers(-1000, 1000), unique=True))
def test_profit_ordered_scores_beat_reversed(profits):
    profits = profits.astype(np.float64)
    good = pa_bce_loss([(profits / 100, profits)]).item()
    bad = pa_bce_loss([(-profits / 100, profits)]).item()
    assert 0 <= good < bad


def test_pa_bce_score_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    p = rng.normal(0, 50, 7)
    s = Parameter(rng.normal(size=7), "s")
    assert ad.gradient_check(lambda: pa_bce_loss([(s, p)]), [s]) < 1e-6


def test_pa_bce_rejects_mismatched_lengths():
    with pytest.raises(DataError):
        pa_bce_loss([(np.zeros(3), np.zeros(4))])
    with pytest.raises(DataError):
        pa_bce_loss([])


# ---------------------------------------------------------------- top-K


def test_topk_keeps_short_groups():
    ds = make_dataset(5, seed=1)
    g = RankingGroup(0, 0, 0, np.arange(5))
    out = topk_sample(g, ds, k=10)
    assert sorted(out.members.tolist()) == list(range(5))


def test_topk_takes_largest_profits():
    ds = make_dataset(100, seed=2)
    out = topk_sample(RankingGroup(0, 0, 0, np.arange(100)), ds, k=20)
    assert out.members.tolist() == np.argsort(-ds.next_total_pl)[:20].tolist()


def test_topk_boundary_ties_use_account_id():
    ds = make_dataset(6, seed=3)
    ds.next_total_pl[:] = [5.0, 1.0, 1.0, 1.0, 9.0, 0.0]
    ds.account_id[:] = [10, 30, 20, 40, 50, 60]
    out = topk_sample(RankingGroup(0, 0, 0, np.arange(6)), ds, k=3)
    assert out.members.tolist() == [4, 0, 2]


# ---------------------------------------------------------------- baselines


def test_baseline_hand_values():
    assert bce_loss(np.array([0.0]), np.array([1.0])).item() == pytest.approx(0.693147, abs=1e-6)
    assert weighted_bce_loss(np.array([0.0]), np.array([1.0]), weight=2.0).item() == pytest.approx(1.386294, abs=1e-6)
    assert logsoftmax_loss(np.zeros(4), np.array([0, 1, 0, 0])).item() == pytest.approx(math.log(4), abs=1e-12)
    assert logsoftmax_loss(np.zeros(4), np.zeros(4)).item() == 0.0


def test_weighted_bce_counts_positive_weight_only_on_positives():
    s, t = np.array([0.3, -1.2]), np.array([1.0, 0.0])
    ref = -10 * math.log(1 / (1 + math.exp(-0.3))) - math.log(1 - 1 / (1 + math.exp(1.2)))
    assert weighted_bce_loss(s, t, weight=10).item() == pytest.approx(ref, rel=1e-12)


def test_masked_slots_are_ignored():
    s = np.array([[0.0, 5.0, 9.0]])
    t = np.array([[1.0, 0.0, 1.0]])
    mask = np.array([[True, True, False]])
    ref = math.log(2) + math.log1p(math.exp(5))
    assert bce_loss(s, t, mask).item() == pytest.approx(ref, rel=1e-12)
    assert logsoftmax_loss(s, t, mask).item() == pytest.approx(-(0 - math.log(1 + math.exp(5))), rel=1e-12)


# ---------------------------------------------------------------- pairwise label balance


def test_pairwise_balance_examples():
    assert pairwise_label_balance(np.array([1.0, 2.0, 3.0])) == (3, 3)
    assert pairwise_label_balance(np.random.default_rng(0).permutation(50).astype(float)) == (1225, 1225)
    with pytest.raises(DataError):
        pairwise_label_balance(np.array([1.0, 2.0, 1.0]))


@given(arrays(np.float64, st.integers(2, 50), elements=st.floats(-1e6, 1e6), unique=True))
def test_pairwise_balance_property(p):
    n = len(p)
    assert pairwise_label_balance(p) == (n * (n - 1) // 2, n * (n - 1) // 2)
