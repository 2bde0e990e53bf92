import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import spearmanr

from riskrank.data import (
    Dataset,
    IngestConfig,
    RankingGroup,
    Schema,
    SplitSpec,
    TradeLedger,
    allocate_groups,
    apply_minmax,
    assign_labels,
    compute_return,
    fit_minmax,
    ingest_csv,
    normalize_splits,
    read_csv,
    read_groups,
    split_dataset,
    top_alpha,
    write_csv,
    write_groups,
)
from riskrank.errors import ConfigError, DataError
from riskrank.synthetic import CONTINUOUS, Calibration, generate_synthetic, sample_class_features

from conftest import make_dataset


def cell_dataset(n_risky, n_normal, market=0, period=0):
    n = n_risky + n_normal
    schema = Schema(["f"], ["market"], [1], market_column="market")
    label = np.r_[np.ones(n_risky), np.zeros(n_normal)].astype(int)
    return Dataset(schema, np.arange(n), np.full(n, period), np.zeros((n, 1)), np.zeros((n, 1), int),
                   label * 100.0 - np.arange(n), np.zeros(n), label)


# ---------------------------------------------------------------- returns and labels


def test_return_hand_values():
    ledger = TradeLedger(pnl={0: np.array([10.0, -5, 15])}, margin={0: np.full(3, 100.0)})
    assert compute_return(ledger, 0, 0, window=3) == pytest.approx(20 / 300, abs=1e-12)
    assert compute_return(ledger, 0, 0, window=3) == pytest.approx(0.066667, abs=1e-6)
    single = TradeLedger(pnl={1: np.array([-50.0])}, margin={1: np.array([200.0])})
    assert compute_return(single, 1, 0, window=1) == -0.25
    zero = TradeLedger(pnl={2: np.zeros(4)}, margin={2: np.ones(4)})
    assert compute_return(zero, 2, 0, window=4) == 0.0


def test_return_window_errors():
    ledger = TradeLedger(pnl={0: np.ones(5)}, margin={0: np.ones(5)})
    with pytest.raises(DataError):
        compute_return(ledger, 0, 2, window=4)
    with pytest.raises(DataError):
        compute_return(ledger, 9, 0, window=1)
    with pytest.raises(DataError):
        TradeLedger(pnl={0: np.ones(2)}, margin={0: np.array([1.0, 0.0])})


def test_labels_top_one_percent():
    rng = np.random.default_rng(0)
    returns = {(i, 20): float(r) for i, r in enumerate(rng.normal(size=1000))}
    labels = assign_labels(returns, alpha=1)
    assert sum(labels.values()) == 10
    top = sorted(returns, key=returns.get, reverse=True)[:10]
    assert all(labels[k] == 1 for k in top)


def test_labels_alpha_fifty():
    returns = {(0, 1): 0.9, (1, 1): 0.1, (2, 1): 0.5}
    assert assign_labels(returns, alpha=50) == {(0, 1): 1, (1, 1): 0, (2, 1): 1}


def test_labels_ties_follow_key_order():
    returns = {(k, 0): 0.3 for k in (5, 2, 9, 1)}
    labels = assign_labels(returns, alpha=50)
    assert [k for k, v in sorted(labels.items()) if v] == [(1, 0), (2, 0)]


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=300), st.floats(0.5, 60))
def test_top_alpha_count_and_threshold(values, alpha):
    mask = top_alpha(np.array(values), alpha)
    k = math.ceil(round(alpha / 100 * len(values), 9))
    assert mask.sum() == k
    if 0 < k < len(values):
        assert min(np.array(values)[mask == 1]) >= max(np.array(values)[mask == 0])


def test_top_alpha_errors():
    with pytest.raises(DataError):
        top_alpha(np.array([]), 1)
    with pytest.raises(ConfigError):
        top_alpha(np.ones(3), 0)


# ---------------------------------------------------------------- normalization


def test_constant_column_normalizes_to_zero():
    x = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
    lo, hi = fit_minmax(x)
    out = apply_minmax(x, lo, hi)
    np.testing.assert_array_equal(out[:, 0], 0.0)
    np.testing.assert_allclose(out[:, 1], np.arange(5) / 4)


def test_normalization_uses_train_parameters_and_clips():
    ds = make_dataset(60, seed=1)
    train, other = ds.subset(np.arange(30)), ds.subset(np.arange(30, 60))
    ntrain, nother = normalize_splits(train, other)
    lo, hi = fit_minmax(train.x_cont)
    np.testing.assert_allclose(nother.x_cont, np.clip((other.x_cont - lo) / (hi - lo), 0, 1))
    assert ntrain.schema.norm_min == lo.tolist()
    assert ntrain.x_cont.min() == 0.0 and ntrain.x_cont.max() == 1.0


@given(st.integers(0, 1000))
def test_normalization_idempotent(seed):
    ds = make_dataset(30, seed=seed)
    once = normalize_splits(ds)[0]
    lo, hi = np.array(once.schema.norm_min), np.array(once.schema.norm_max)
    twice = normalize_splits(once)[0]
    np.testing.assert_allclose(apply_minmax(once.x_cont, *fit_minmax(once.x_cont)), once.x_cont, atol=1e-15)
    np.testing.assert_allclose(twice.x_cont, once.x_cont, atol=1e-15)
    assert np.all(lo <= hi)


# ---------------------------------------------------------------- splitting


def test_split_counts_stratified():
    ds = make_dataset(10_000, n_pos=100, seed=3)
    train, valid, test = split_dataset(ds, SplitSpec(seed=0))
    assert (len(train), train.label.sum()) == (7000, 70)
    assert (len(valid), valid.label.sum()) == (1000, 10)
    assert (len(test), test.label.sum()) == (2000, 20)
    ids = np.concatenate([train.account_id, valid.account_id, test.account_id])
    assert len(np.unique(ids)) == 10_000


def test_split_deterministic_and_needs_positives():
    ds = make_dataset(1000, n_pos=10, seed=4)
    a = split_dataset(ds, SplitSpec(seed=11))
    b = split_dataset(ds, SplitSpec(seed=11))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.account_id, y.account_id)
    with pytest.raises(DataError):
        split_dataset(make_dataset(100, n_pos=0), SplitSpec())
    with pytest.raises(ConfigError):
        SplitSpec(train=0.5, valid=0.1, test=0.1)


# ---------------------------------------------------------------- group allocation


def test_allocation_hand_trace():
    ds = cell_dataset(2, 10)
    groups = allocate_groups(ds, 5, "train", seed=0)
    assert len(groups) == 2
    assert all(len(g) == 5 and ds.label[g.members].sum() == 1 for g in groups)
    used = np.concatenate([g.members for g in groups])
    assert len(set(used)) == 10
    assert 10 - np.isin(np.arange(2, 12), used).sum() == 2  # discarded normals


def test_allocation_needs_both_pools():
    assert allocate_groups(cell_dataset(3, 0), 5, "train") == []
    assert allocate_groups(cell_dataset(0, 7), 5, "train") == []


def test_test_mode_verbatim_and_exhaustive():
    ds = cell_dataset(3, 247)
    verbatim = allocate_groups(ds, 100, "test", seed=0)
    assert [len(g) for g in verbatim] == [99]
    full = allocate_groups(ds, 100, "test", seed=0, exhaustive=True)
    assert sorted(np.concatenate([g.members for g in full])) == list(range(250))
    assert max(len(g) for g in full) == 100


def test_allocation_errors():
    with pytest.raises(ConfigError):
        allocate_groups(cell_dataset(1, 1), 1)
    with pytest.raises(ConfigError):
        allocate_groups(cell_dataset(1, 1), 5, "valid")


@given(seed=st.integers(0, 10_000), size=st.sampled_from([2, 5, 20, 50]), n=st.integers(20, 200))
def test_train_groups_have_one_positive(seed, size, n):
    ds = make_dataset(n, n_pos=max(1, n // 7), seed=seed, markets=3, periods=3)
    groups = allocate_groups(ds, size, "train", seed)
    members = np.concatenate([g.members for g in groups]) if groups else np.array([], int)
    assert len(members) == len(set(members.tolist()))
    for g in groups:
        assert ds.label[g.members].sum() == 1
        assert 2 <= len(g) <= size
        assert len(set(ds.market[g.members])) == 1 and len(set(ds.period[g.members])) == 1


@given(seed=st.integers(0, 10_000), size=st.integers(2, 60))
def test_exhaustive_covers_every_row_once(seed, size):
    ds = make_dataset(120, seed=seed, markets=3, periods=2)
    groups = allocate_groups(ds, size, "test", seed, exhaustive=True)
    assert sorted(np.concatenate([g.members for g in groups]).tolist()) == list(range(120))


# ---------------------------------------------------------------- files


def test_ingest_top_one_percent(tmp_path):
    rng = np.random.default_rng(0)
    frame = pd.DataFrame({"amount": rng.exponential(100, 300), "f1": rng.normal(size=300), "f2": rng.normal(size=300)})
    path = tmp_path / "tx.csv"
    frame.to_csv(path, index=False)
    ds = ingest_csv(path, IngestConfig(continuous=["f1", "f2"], profit_column="amount"))
    assert ds.label.sum() == 3
    assert set(np.argsort(-frame["amount"].to_numpy())[:3]) == set(np.flatnonzero(ds.label))


def test_ingest_errors_name_the_problem(tmp_path):
    path = tmp_path / "tx.csv"
    path.write_text("amount,f1\n1,2\nx,3\n")
    with pytest.raises(DataError, match="'f2'"):
        ingest_csv(path, IngestConfig(continuous=["f1", "f2"], profit_column="amount"))
    with pytest.raises(DataError, match="line 3"):
        ingest_csv(path, IngestConfig(continuous=["f1"], profit_column="amount"))
    with pytest.raises(DataError):
        ingest_csv(tmp_path / "absent.csv", IngestConfig(continuous=["f1"], profit_column="amount"))


def test_csv_and_groups_round_trip(tmp_path, small_dataset):
    write_csv(small_dataset, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv", small_dataset.schema)
    np.testing.assert_array_equal(back.x_cont, small_dataset.x_cont)
    np.testing.assert_array_equal(back.label, small_dataset.label)
    groups = [RankingGroup(0, 1, 2, np.array([3, 1])), RankingGroup(1, 0, 0, np.array([0]))]
    write_groups(groups, tmp_path / "g.jsonl")
    again = read_groups(tmp_path / "g.jsonl")
    assert [(g.group_id, g.market_cluster, g.period, g.members.tolist()) for g in again] == [
        (0, 1, 2, [3, 1]),
        (1, 0, 0, [0]),
    ]


def test_dataset_rejects_bad_values(small_dataset):
    with pytest.raises(DataError):
        Dataset(small_dataset.schema, [0], [0], [[0, 0, 0]], [[0, 7]], [1.0], [1.0], [0])
    with pytest.raises(DataError):
        Dataset(small_dataset.schema, [0], [0], [[0, 0, 0]], [[0, 0]], [1.0], [1.0], [2])


# ---------------------------------------------------------------- synthetic generator


def test_synthetic_deterministic():
    a = generate_synthetic(1000, 200, seed=7).dataset
    b = generate_synthetic(1000, 200, seed=7).dataset
    for name in ("x_cont", "x_cat", "next_total_pl", "label"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_risky_profit_rate_mean():
    x = sample_class_features(10_000, risky=True, seed=0)
    assert abs(x[:, CONTINUOUS.index("ProfitRate20")].mean() - 0.623) <= 0.01
    y = sample_class_features(10_000, risky=False, seed=0)
    assert abs(y[:, CONTINUOUS.index("ProfitRate20")].mean() - 0.497) <= 0.01


def test_skill_drives_future_profit():
    data = generate_synthetic(1000, 200, seed=3)
    rho = spearmanr(data.skill, data.dataset.next_total_pl).statistic
    assert rho > 0.5
    assert data.dataset.label.mean() == pytest.approx(0.01)


def test_infeasible_moments_fall_back_with_warning():
    cal = Calibration()
    cal.moments = {**cal.moments, "ProfitRate20": (0.5, 0.5, 0.6, 0.6)}
    with pytest.warns(UserWarning, match="truncated normal"):
        x = sample_class_features(2000, risky=False, seed=0, calibration=cal)
    col = x[:, CONTINUOUS.index("ProfitRate20")]
    assert col.min() >= 0 and col.max() <= 1
