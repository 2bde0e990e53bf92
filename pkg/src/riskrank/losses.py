"""Profit-aware pairwise BCE and the pointwise/listwise baselines it is compared to."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from riskrank import autodiff as ad
from riskrank.autodiff import Tensor
from riskrank.data import Dataset, RankingGroup
from riskrank.errors import ConfigError, DataError

LOSS_NAMES = ("pa-bce", "bce", "w-bce", "logsoftmax")


@dataclass
class GapMatrices:
    g_pnl: np.ndarray
    g_score: np.ndarray
    target: np.ndarray
    order: np.ndarray  # positions of the profit-sorted members in the caller's order


def profit_order(profits: np.ndarray, tiebreak: np.ndarray | None = None) -> np.ndarray:
    """Permutation sorting profits descending; ties by ``tiebreak`` then position."""
    profits = np.asarray(profits, dtype=np.float64)
    keys = [np.arange(profits.size)]
    if tiebreak is not None:
        keys.append(np.asarray(tiebreak))
    keys.append(-profits)
    return np.lexsort(tuple(keys))


def build_pnl_gap(profits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric log P&L gap matrix over profit-sorted members.

    Returns ``(matrix, order)`` where ``order`` sorts the input descending; the
    matrix rows/columns follow that sorted order.
    """
    profits = np.asarray(profits, dtype=np.float64)
    order = profit_order(profits)
    p = profits[order]
    gap = p[:, None] - p[None, :]
    upper = np.triu(np.log1p(np.maximum(gap, 0.0)), k=1)
    return upper + upper.T, order


def build_score_gap(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    out = ad.sigmoid(ad.Tensor(s[:, None] - s[None, :])).data
    np.fill_diagonal(out, 0.0)
    return out


def target_matrix(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n)), k=1)


def gap_matrices(scores: np.ndarray, profits: np.ndarray) -> GapMatrices:
    if len(scores) != len(profits):
        raise DataError("scores and profits differ in length")
    g_pnl, order = build_pnl_gap(profits)
    g_score = build_score_gap(np.asarray(scores, dtype=np.float64)[order])
    return GapMatrices(g_pnl, g_score, target_matrix(len(order)), order)


def pair_weights(profits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Upper-triangular weights ln(1 + p_i - p_j) for batches sorted by profit, (B, n, n).

    Padded slots (mask False) get weight 0.
    """
    p = np.asarray(profits, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    gap = p[:, :, None] - p[:, None, :]
    if mask is not None:
        valid = mask[:, :, None] & mask[:, None, :]
        gap = np.where(valid, gap, 0.0)
    if (np.triu(gap, k=1) < 0).any():
        raise DataError("profits must be sorted descending within each group")
    return np.triu(np.log1p(np.maximum(gap, 0.0)), k=1)


def pa_bce_batch(scores: Tensor, profits: np.ndarray, mask: np.ndarray | None = None, reduction: str = "sum") -> Tensor:
    """PA-BCE over the upper triangle for profit-sorted, padded groups.

    Each pair i<j contributes ln(1 + p_i - p_j) * softplus(-(s_i - s_j)).
    """
    if scores.ndim == 1:
        scores = scores.reshape(1, scores.shape[0])
    if scores.shape[-1] != np.shape(profits)[-1]:
        raise DataError("scores and profits differ in length")
    w = pair_weights(profits, mask)
    n = scores.shape[1]
    diff = scores.reshape(scores.shape[0], n, 1) - scores.reshape(scores.shape[0], 1, n)
    per_group = (ad.softplus(-diff) * w).sum(axis=(1, 2))
    return _reduce(per_group, reduction)


def pa_bce_loss(groups: Sequence[tuple[Tensor | np.ndarray, np.ndarray]], reduction: str = "sum") -> Tensor:
    """PA-BCE summed over groups of (scores, profits) in any member order."""
    total = None
    for scores, profits in groups:
        scores = ad.as_tensor(scores)
        profits = np.asarray(profits, dtype=np.float64)
        if scores.shape[0] != profits.size:
            raise DataError("scores and profits differ in length")
        order = profit_order(profits)
        term = pa_bce_batch(scores[order], profits[order], reduction="sum")
        total = term if total is None else total + term
    if total is None:
        raise DataError("no groups given")
    if reduction == "mean":
        total = total * (1.0 / len(groups))
    return total


def pa_bce_full_matrix(scores: np.ndarray, profits: np.ndarray) -> float:
    """Sum over every ordered pair i != j of G_pnl * BCE(G_score, T) (no triangle shortcut)."""
    m = gap_matrices(scores, profits)
    p = m.g_score
    t = m.target
    off = ~np.eye(len(t), dtype=bool)
    with np.errstate(divide="ignore"):
        bce = -(t * np.log(np.where(off, p, 1.0)) + (1 - t) * np.log(np.where(off, 1 - p, 1.0)))
    return float(np.sum(m.g_pnl * bce * off))


def topk_sample(group: RankingGroup, ds: Dataset, k: int = 20) -> RankingGroup:
    """Keep the k most profitable members, ordered by profit descending (ties by account id)."""
    if k < 2:
        raise ConfigError("top-K needs k >= 2")
    m = group.members
    order = profit_order(ds.next_total_pl[m], ds.account_id[m])
    return replace(group, members=m[order][:k])


# ---------------------------------------------------------------- baselines


def _reduce(per_group: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return per_group.sum()
    if reduction == "mean":
        return per_group.mean()
    raise ConfigError(f"unknown reduction {reduction!r}")


def _as_batch(scores, labels, mask):
    scores = ad.as_tensor(scores)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores.reshape(1, scores.shape[0])
        labels = labels.reshape(1, -1)
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in shape")
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)
    return scores, labels, np.asarray(mask, dtype=bool).reshape(labels.shape)


def weighted_bce_loss(scores, labels, weight: float = 10.0, mask=None, reduction: str = "sum") -> Tensor:
    """sum of -w [t log sigmoid(s) + (1-t) log(1 - sigmoid(s))], w = weight on positives."""
    scores, labels, mask = _as_batch(scores, labels, mask)
    w = np.where(labels == 1, weight, 1.0) * mask
    per_item = labels * ad.softplus(-scores) + (1.0 - labels) * ad.softplus(scores)
    return _reduce((per_item * w).sum(axis=1), reduction)


def bce_loss(scores, labels, mask=None, reduction: str = "sum") -> Tensor:
    return weighted_bce_loss(scores, labels, 1.0, mask, reduction)


def logsoftmax_loss(scores, labels, mask=None, reduction: str = "sum") -> Tensor:
    """Negative log-softmax of the positives within each group; groups without positives add 0."""
    scores, labels, mask = _as_batch(scores, labels, mask)
    logp = ad.log_softmax(scores + np.where(mask, 0.0, -1e30), axis=-1)
    pos = (labels == 1) & mask
    return _reduce(-(logp * pos).sum(axis=1), reduction)


def batch_loss(
    name: str,
    scores: Tensor,
    profits: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray,
    reduction: str = "sum",
    pos_weight: float = 10.0,
) -> Tensor:
    """Dispatch on the loss name for padded, profit-sorted group batches."""
    if name == "pa-bce":
        return pa_bce_batch(scores, profits, mask, reduction)
    if name == "bce":
        return bce_loss(scores, labels, mask, reduction)
    if name == "w-bce":
        return weighted_bce_loss(scores, labels, pos_weight, mask, reduction)
    if name == "logsoftmax":
        return logsoftmax_loss(scores, labels, mask, reduction)
    raise ConfigError(f"unknown loss {name!r}; choose from {', '.join(LOSS_NAMES)}")


# ---------------------------------------------------------------- pairwise label balance


def pairwise_label_balance(profits: np.ndarray) -> tuple[int, int]:
    """Count positive and negative pairwise labels over all ordered pairs i != j."""
    p = np.asarray(profits, dtype=np.float64)
    uniq, counts = np.unique(p, return_counts=True)
    if (counts > 1).any():
        raise DataError(f"duplicate profit {uniq[counts > 1][0]!r}; pairwise labels undefined")
    greater = p[:, None] > p[None, :]
    less = p[:, None] < p[None, :]
    return int(greater.sum()), int(less.sum())
