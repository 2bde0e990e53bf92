import numpy as np
import pytest
from scipy.optimize import minimize

from riskrank.data import read_csv, write_csv
from riskrank.errors import DataError
from riskrank.twostep import (
    SCORE_COLUMN,
    LogisticRegression,
    design_matrix,
    export_two_step,
    feature_names,
    second_step_classifier,
)

from conftest import make_dataset


def splits(seed=0, n=(600, 200, 400), pos=0.05):
    out = []
    for i, size in enumerate(n):
        ds = make_dataset(size, n_pos=int(size * pos), seed=seed * 10 + i, n_cont=3)
        out.append(ds)
    return out


def test_export_adds_one_normalized_column(tmp_path):
    train, valid, test = splits()
    scores = [np.linspace(-2, 2, len(d)) for d in (train, valid, test)]
    aug = export_two_step(scores, [train, valid, test])
    assert [len(a.schema.continuous) for a in aug] == [4, 4, 4]
    assert aug[0].schema.continuous[-1] == SCORE_COLUMN
    np.testing.assert_allclose(aug[0].x_cont[:, -1], np.linspace(0, 1, len(train)))
    write_csv(train, tmp_path / "a.csv")
    write_csv(aug[0], tmp_path / "b.csv")
    before = (tmp_path / "a.csv").read_text().splitlines()
    after = (tmp_path / "b.csv").read_text().splitlines()
    for old, new in zip(before, after):
        assert new.split(",")[:5] == old.split(",")[:5]  # ids and original features untouched
    back = read_csv(tmp_path / "b.csv", aug[0].schema)
    np.testing.assert_array_equal(back.x_cont, aug[0].x_cont)


def test_constant_scores_become_zero():
    train, valid, test = splits()
    aug = export_two_step([np.full(len(d), 3.0) for d in (train, valid, test)], [train, valid, test])
    assert all(np.all(a.x_cont[:, -1] == 0.0) for a in aug)


def test_export_errors():
    train, valid, test = splits()
    with pytest.raises(DataError):
        export_two_step([np.zeros(3)], [train])
    aug = export_two_step([np.zeros(len(train))], [train])
    with pytest.raises(DataError, match="already"):
        export_two_step([np.zeros(len(train))], aug)


def test_design_matrix_one_hot_drops_first_level():
    ds = make_dataset(10, seed=1)
    x = design_matrix(ds)
    assert x.shape == (10, 3 + (2 - 1) + (3 - 1))
    np.testing.assert_array_equal(x[:, 3], ds.x_cat[:, 0] == 1)
    np.testing.assert_array_equal(x[:, 5], ds.x_cat[:, 1] == 2)
    assert feature_names(ds)[3:] == ["market=1", "kind=1", "kind=2"]


@pytest.mark.parametrize("balanced", [True, False])
def test_logistic_regression_matches_generic_optimizer(balanced):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(300, 4))
    y = (x @ [1.5, -1, 0, 0.5] + rng.normal(size=300) > 1.5).astype(float)
    model = LogisticRegression(l2=0.7, balanced=balanced).fit(x, y)
    sw = np.ones(300)
    if balanced:
        sw = np.where(y == 1, 300 / (2 * y.sum()), 300 / (2 * (300 - y.sum())))

    def objective(w):
        z = x @ w[:-1] + w[-1]
        return np.sum(sw * (np.logaddexp(0, z) - y * z)) + 0.35 * np.sum(w[:-1] ** 2)

    ref = minimize(objective, np.zeros(5), method="BFGS", options={"gtol": 1e-10}).x
    np.testing.assert_allclose(model.coef, ref[:-1], atol=1e-5)
    assert model.intercept == pytest.approx(ref[-1], abs=1e-5)


def test_logistic_regression_single_class():
    with pytest.raises(DataError):
        LogisticRegression().fit(np.ones((5, 2)), np.zeros(5))
    with pytest.raises(DataError):
        LogisticRegression().predict_proba(np.ones((1, 2)))


def test_perfect_score_column_does_not_hurt():
    train, valid, test = splits(seed=2)
    base = second_step_classifier(train, valid, test)
    perfect = [d.label.astype(float) for d in (train, valid, test)]
    aug = second_step_classifier(*export_two_step(perfect, [train, valid, test]))
    assert aug.f1 >= base.f1
    assert aug.f1 == 1.0


def test_noise_feature_has_no_importance():
    train, valid, test = splits(seed=4)
    rng = np.random.default_rng(0)
    for d in (train, valid, test):
        d.x_cont[:, 0] = (d.next_total_pl - d.next_total_pl.mean()) / d.next_total_pl.std()
    noise = [rng.uniform(size=len(d)) for d in (train, valid, test)]
    result = second_step_classifier(*export_two_step(noise, [train, valid, test]), seed=1)
    assert abs(result.importance[SCORE_COLUMN]) < 0.01
    assert result.ascending_importance()[-1][0] == "c0"


def test_second_step_reproducible():
    train, valid, test = splits(seed=5)
    a = second_step_classifier(train, valid, test, seed=3)
    b = second_step_classifier(train, valid, test, seed=3)
    assert a.coef == b.coef and a.importance == b.importance
    assert all(np.isfinite(list(a.coef.values())))
