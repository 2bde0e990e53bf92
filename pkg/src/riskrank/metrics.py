"""Ranking, classification and hedging P&L metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from riskrank.data import top_alpha
from riskrank.errors import ConfigError, DataError

THRESHOLD_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


def rank_labels(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Labels reordered by score descending; equal scores keep input order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.asarray(labels)[order]


def dcg_at_k(ranked: np.ndarray, k: int) -> float:
    rel = np.asarray(ranked, dtype=np.float64)[:k]
    return float(np.sum((2.0**rel - 1.0) / np.log2(np.arange(2, rel.size + 2))))


def ndcg_at_k(ranked: Sequence[int], k: int) -> float:
    """NDCG@k of a ranked label list; NaN when the list has no positive."""
    if k < 1:
        raise ConfigError("k must be at least 1")
    ranked = np.asarray(ranked, dtype=np.float64)
    ideal = dcg_at_k(np.sort(ranked)[::-1], k)
    if ideal == 0.0:
        return math.nan
    return dcg_at_k(ranked, k) / ideal


def reciprocal_rank(ranked: Sequence[int]) -> float:
    hits = np.flatnonzero(np.asarray(ranked) > 0)
    return 1.0 / (hits[0] + 1) if hits.size else math.nan


def mean_ndcg(ranked_lists: Sequence[Sequence[int]], k: int) -> float:
    vals = [ndcg_at_k(r, k) for r in ranked_lists]
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def mrr(ranked_lists: Sequence[Sequence[int]]) -> float:
    vals = [reciprocal_rank(r) for r in ranked_lists]
    vals = [v for v in vals if not math.isnan(v)]
    if not vals:
        raise DataError("no group contains a positive; MRR undefined")
    return float(np.mean(vals))


def pnl_metric(predictions: np.ndarray, next_profit_20: np.ndarray) -> float:
    """Market-maker P&L: unhedged trades (y=0) pay out the trader's next-20-trade profit."""
    y = np.asarray(predictions, dtype=np.float64)
    p = np.asarray(next_profit_20, dtype=np.float64)
    if y.shape != p.shape:
        raise DataError("predictions and profits differ in length")
    return float(np.sum(-(1.0 - y) * p))


def classify_with_prior(scores: np.ndarray, prior: float = 0.01, ids: np.ndarray | None = None) -> np.ndarray:
    """Flag the top ceil(prior * N) scores as risky; ties go to the smaller id."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise DataError("no scores to classify")
    return top_alpha(scores, prior * 100.0, ids)


@dataclass
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @staticmethod
    def _ratio(a: float, b: float) -> float:
        return a / b if b else 0.0

    @property
    def precision(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def sensitivity(self) -> float:
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return self._ratio(self.tn, self.tn + self.fp)

    @property
    def f1_positive(self) -> float:
        return self._ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def f1_negative(self) -> float:
        return self._ratio(2 * self.tn, 2 * self.tn + self.fn + self.fp)

    @property
    def macro_f1(self) -> float:
        return 0.5 * (self.f1_positive + self.f1_negative)


def confusion_metrics(predictions: np.ndarray, labels: np.ndarray) -> Confusion:
    y = np.asarray(predictions).astype(bool)
    t = np.asarray(labels).astype(bool)
    if y.shape != t.shape:
        raise DataError("predictions and labels differ in length")
    return Confusion(
        tp=int(np.sum(y & t)), fp=int(np.sum(y & ~t)), tn=int(np.sum(~y & ~t)), fn=int(np.sum(~y & t))
    )


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outscores a random negative, ties counting 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(labels).astype(bool)
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes")
    ranks = rankdata(s)  # midranks handle ties
    return float((ranks[t].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def select_threshold(val_probs: np.ndarray, val_labels: np.ndarray, grid: Sequence[float] = THRESHOLD_GRID) -> float:
    """Grid threshold maximizing validation macro F1; smallest threshold wins ties."""
    if len(val_probs) == 0:
        raise DataError("empty validation set")
    best_t, best_f1 = None, -1.0
    for t in grid:
        f1 = confusion_metrics(np.asarray(val_probs) >= t, val_labels).macro_f1
        if f1 > best_f1 + 1e-15:
            best_t, best_f1 = t, f1
    return float(best_t)


def classify_without_prior(
    val_scores: np.ndarray,
    val_labels: np.ndarray,
    test_scores: np.ndarray,
    grid: Sequence[float] = THRESHOLD_GRID,
    apply_sigmoid: bool = True,
) -> tuple[float, np.ndarray]:
    """Pick a threshold on sigmoid(score) by validation macro F1, then apply it to test scores."""
    squash = _sigmoid if apply_sigmoid else np.asarray
    threshold = select_threshold(squash(val_scores), val_labels, grid)
    return threshold, (squash(test_scores) >= threshold).astype(np.int64)


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    regime: str
    ndcg3: float
    ndcg5: float
    ndcg10: float
    mrr: float
    pnl: float
    f1: float
    auc: float
    precision: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float | None = None
    n_groups: int = 0
    seed: int | None = None
    config_hash: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [
            ("regime", self.regime),
            ("NDCG@3", f"{self.ndcg3:.4f}"),
            ("NDCG@5", f"{self.ndcg5:.4f}"),
            ("NDCG@10", f"{self.ndcg10:.4f}"),
            ("MRR", f"{self.mrr:.4f}"),
            ("P&L", f"{self.pnl:.3f}"),
            ("F1 (macro)", f"{self.f1:.4f}"),
            ("AUC", f"{self.auc:.4f}"),
            ("precision", f"{self.precision:.4f}"),
            ("sensitivity", f"{self.sensitivity:.4f}"),
            ("specificity", f"{self.specificity:.4f}"),
            ("TP/FP/TN/FN", f"{self.tp}/{self.fp}/{self.tn}/{self.fn}"),
            ("threshold", "-" if self.threshold is None else f"{self.threshold:.1f}"),
            ("groups", str(self.n_groups)),
            ("seed", str(self.seed)),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def per_group_rows(group_ids: Sequence[int], ranked_lists: Sequence[np.ndarray]) -> list[dict]:
    """Rows for the per-group dump (group_id, ndcg3, ndcg5, ndcg10, rr)."""
    return [
        {
            "group_id": int(gid),
            "ndcg3": ndcg_at_k(r, 3),
            "ndcg5": ndcg_at_k(r, 5),
            "ndcg10": ndcg_at_k(r, 10),
            "rr": reciprocal_rank(r),
        }
        for gid, r in zip(group_ids, ranked_lists)
    ]


def build_report(
    regime: str,
    ranked_lists: Sequence[np.ndarray],
    scores: np.ndarray,
    labels: np.ndarray,
    next_profit_20: np.ndarray,
    predictions: np.ndarray,
    threshold: float | None = None,
    seed: int | None = None,
    config_hash: str | None = None,
) -> EvalReport:
    conf = confusion_metrics(predictions, labels)
    try:
        mrr_value = mrr(ranked_lists)
    except DataError:
        mrr_value = math.nan
    try:
        auc_value = auc(scores, labels)
    except DataError:
        auc_value = math.nan
    return EvalReport(
        regime=regime,
        ndcg3=mean_ndcg(ranked_lists, 3),
        ndcg5=mean_ndcg(ranked_lists, 5),
        ndcg10=mean_ndcg(ranked_lists, 10),
        mrr=mrr_value,
        pnl=pnl_metric(predictions, next_profit_20),
        f1=conf.macro_f1,
        auc=auc_value,
        precision=conf.precision,
        sensitivity=conf.sensitivity,
        specificity=conf.specificity,
        tp=conf.tp,
        fp=conf.fp,
        tn=conf.tn,
        fn=conf.fn,
        threshold=threshold,
        n_groups=len(ranked_lists),
        seed=seed,
        config_hash=config_hash,
    )
