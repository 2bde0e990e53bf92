"""Second-step classification on features augmented with first-step ranking scores."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from riskrank.data import Dataset, apply_minmax, fit_minmax
from riskrank.errors import DataError, NumericError
from riskrank.metrics import THRESHOLD_GRID, confusion_metrics, pnl_metric, select_threshold

SCORE_COLUMN = "fst_step_scores"


def export_two_step(scores: Sequence[np.ndarray], datasets: Sequence[Dataset]) -> list[Dataset]:
    """Append ``fst_step_scores`` as a continuous feature to each split.

    The first split is the training split: min-max parameters are fitted on its
    scores and applied to the rest.
    """
    if len(scores) != len(datasets) or not datasets:
        raise DataError("need one score array per split")
    arrays = []
    for s, ds in zip(scores, datasets):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (len(ds),):
            raise DataError(f"{s.size} scores for a split of {len(ds)} records")
        arrays.append(s)
    if SCORE_COLUMN in datasets[0].schema.continuous:
        raise DataError(f"{SCORE_COLUMN} already present")
    lo, hi = fit_minmax(arrays[0][:, None])
    schema = datasets[0].schema
    schema = replace(
        schema,
        continuous=[*schema.continuous, SCORE_COLUMN],
        norm_min=None if schema.norm_min is None else [*schema.norm_min, float(lo[0])],
        norm_max=None if schema.norm_max is None else [*schema.norm_max, float(hi[0])],
    )
    out = []
    for s, ds in zip(arrays, datasets):
        col = apply_minmax(s[:, None], lo, hi)
        out.append(replace(ds, schema=schema, x_cont=np.hstack([ds.x_cont, col])))
    return out


def design_matrix(ds: Dataset) -> np.ndarray:
    """Continuous features followed by one-hot categoricals (first level dropped)."""
    blocks = [ds.x_cont]
    for j, size in enumerate(ds.schema.vocab_sizes):
        onehot = np.zeros((len(ds), max(size - 1, 0)))
        hit = ds.x_cat[:, j] > 0
        onehot[np.flatnonzero(hit), ds.x_cat[hit, j] - 1] = 1.0
        blocks.append(onehot)
    return np.hstack(blocks)


def feature_names(ds: Dataset) -> list[str]:
    names = list(ds.schema.continuous)
    for name, size in zip(ds.schema.categorical, ds.schema.vocab_sizes):
        names += [f"{name}={v}" for v in range(1, size)]
    return names


@dataclass
class LogisticRegression:
    """L2-regularized logistic regression with balanced class weights, fitted by Newton steps."""

    l2: float = 1.0
    balanced: bool = True
    max_iter: int = 100
    tol: float = 1e-10
    coef: np.ndarray | None = None
    intercept: float = 0.0

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LogisticRegression":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n_pos = y.sum()
        if n_pos == 0 or n_pos == y.size:
            raise DataError("second-step training data has a single class")
        sw = np.ones_like(y)
        if self.balanced:
            sw = np.where(y == 1, y.size / (2 * n_pos), y.size / (2 * (y.size - n_pos)))
        xa = np.hstack([x, np.ones((x.shape[0], 1))])
        reg = np.full(xa.shape[1], self.l2)
        reg[-1] = 0.0  # intercept is not penalized
        w = np.zeros(xa.shape[1])
        for _ in range(self.max_iter):
            p = 0.5 * (1.0 + np.tanh(0.5 * (xa @ w)))
            grad = xa.T @ (sw * (p - y)) + reg * w
            hess = (xa * (sw * p * (1 - p))[:, None]).T @ xa + np.diag(reg + 1e-12)
            step = np.linalg.solve(hess, grad)
            w -= step
            if np.max(np.abs(step)) < self.tol:
                break
        if not np.all(np.isfinite(w)):
            raise NumericError("logistic regression diverged")
        self.coef, self.intercept = w[:-1], float(w[-1])
        return self

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if self.coef is None:
            raise DataError("model is not fitted")
        return 0.5 * (1.0 + np.tanh(0.5 * (np.asarray(x, dtype=np.float64) @ self.coef + self.intercept)))


@dataclass
class SecondStepResult:
    threshold: float
    probabilities: np.ndarray
    predictions: np.ndarray
    f1: float
    pnl: float
    coef: dict[str, float]
    importance: dict[str, float]  # mean macro-F1 drop when the feature is shuffled

    def ascending_importance(self) -> list[tuple[str, float]]:
        return sorted(self.importance.items(), key=lambda kv: (kv[1], kv[0]))


def permutation_importance(
    model: LogisticRegression,
    x: np.ndarray,
    y: np.ndarray,
    threshold: float,
    names: Sequence[str],
    n_repeats: int = 5,
    seed: int = 0,
) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    base = confusion_metrics(model.predict_proba(x) >= threshold, y).macro_f1
    out = {}
    for j, name in enumerate(names):
        drops = []
        for _ in range(n_repeats):
            xp = x.copy()
            xp[:, j] = xp[rng.permutation(len(xp)), j]
            drops.append(base - confusion_metrics(model.predict_proba(xp) >= threshold, y).macro_f1)
        out[name] = float(np.mean(drops))
    return out


def second_step_classifier(
    train: Dataset,
    valid: Dataset,
    test: Dataset,
    l2: float = 1.0,
    balanced: bool = True,
    n_repeats: int = 5,
    seed: int = 0,
    grid: Sequence[float] = THRESHOLD_GRID,
) -> SecondStepResult:
    """Fit on train, pick the probability threshold on valid, report on test."""
    names = feature_names(train)
    model = LogisticRegression(l2=l2, balanced=balanced).fit(design_matrix(train), train.label)
    threshold = select_threshold(model.predict_proba(design_matrix(valid)), valid.label, grid)
    x_test = design_matrix(test)
    probs = model.predict_proba(x_test)
    preds = (probs >= threshold).astype(np.int64)
    return SecondStepResult(
        threshold=threshold,
        probabilities=probs,
        predictions=preds,
        f1=confusion_metrics(preds, test.label).macro_f1,
        pnl=pnl_metric(preds, test.next_profit_20),
        coef={n: float(c) for n, c in zip(names, model.coef)},
        importance=permutation_importance(model, x_test, test.label, threshold, names, n_repeats, seed),
    )
