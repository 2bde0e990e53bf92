"""End-to-end helpers shared by the CLI, the experiment scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from riskrank.data import (
    Dataset,
    RankingGroup,
    SplitSpec,
    allocate_groups,
    config_hash,
    normalize_splits,
    split_dataset,
)
from riskrank.autodiff import gradient_check
from riskrank.errors import DataError
from riskrank.losses import pa_bce_loss
from riskrank.metrics import (
    EvalReport,
    build_report,
    classify_with_prior,
    classify_without_prior,
    rank_labels,
)
from riskrank.model import Model, ModelConfig, score_groups
from riskrank.synthetic import Calibration, generate_synthetic
from riskrank.train import History, TrainConfig, finetune, pretrain
from riskrank.twostep import SecondStepResult, export_two_step, second_step_classifier


@dataclass
class ScoredSplit:
    rows: np.ndarray  # dataset rows that received a score
    scores: np.ndarray  # aligned with rows
    ranked: list[np.ndarray]  # per-group labels in score order
    group_ids: list[int]


def score_split(model: Model, groups: Sequence[RankingGroup], ds: Dataset) -> ScoredSplit:
    """Score every group; rows scored more than once keep their first score."""
    per_group = score_groups(groups, ds, model)
    ranked = [rank_labels(s, ds.label[g.members]) for g, s in zip(groups, per_group)]
    rows, scores, seen = [], [], set()
    for g, s in zip(groups, per_group):
        for r, v in zip(g.members, s):
            if int(r) not in seen:
                seen.add(int(r))
                rows.append(int(r))
                scores.append(float(v))
    order = np.argsort(rows)
    return ScoredSplit(
        rows=np.asarray(rows, dtype=np.int64)[order],
        scores=np.asarray(scores)[order],
        ranked=ranked,
        group_ids=[g.group_id for g in groups],
    )


def record_ids(ds: Dataset, rows: np.ndarray) -> np.ndarray:
    return np.column_stack([ds.account_id[rows], ds.period[rows]])


def evaluate_with_prior(scored: ScoredSplit, ds: Dataset, prior: float = 0.01, seed=None, cfg_hash=None) -> EvalReport:
    preds = classify_with_prior(scored.scores, prior, record_ids(ds, scored.rows))
    return build_report(
        "with-prior",
        scored.ranked,
        scored.scores,
        ds.label[scored.rows],
        ds.next_profit_20[scored.rows],
        preds,
        seed=seed,
        config_hash=cfg_hash,
    )


def evaluate_without_prior(
    scored: ScoredSplit, ds: Dataset, val_scored: ScoredSplit, valid: Dataset, seed=None, cfg_hash=None
) -> EvalReport:
    threshold, preds = classify_without_prior(val_scored.scores, valid.label[val_scored.rows], scored.scores)
    return build_report(
        "without-prior",
        scored.ranked,
        scored.scores,
        ds.label[scored.rows],
        ds.next_profit_20[scored.rows],
        preds,
        threshold=threshold,
        seed=seed,
        config_hash=cfg_hash,
    )


# ---------------------------------------------------------------- synthetic experiment


@dataclass
class ExperimentConfig:
    """Settings of the synthetic loss-comparison experiment.

    Both losses get the same short fine-tuning budget from the same random
    initialization; with long budgets either loss saturates the synthetic task.
    """

    n_traders: int = 2000
    trades_per_trader: int = 200
    train_group_size: int = 50
    test_group_size: int = 100
    exhaustive_test_groups: bool = True
    topk: int = 20
    d_k: int = 32
    n_heads: int = 2
    ff_width: int = 128
    n_self_layers: int = 2
    n_cross_layers: int = 4
    pretrain_epochs: int = 0
    finetune_epochs: int = 7
    lr: float = 1e-3
    batch_size: int = 32
    calibration: Calibration = field(default_factory=Calibration)

    def hash(self) -> str:
        return config_hash(asdict(self))


@dataclass
class PreparedData:
    train: Dataset
    valid: Dataset
    test: Dataset
    train_groups: list[RankingGroup]
    valid_groups: list[RankingGroup]
    test_groups: list[RankingGroup]


def prepare_synthetic(seed: int, cfg: ExperimentConfig) -> PreparedData:
    data = generate_synthetic(cfg.n_traders, cfg.trades_per_trader, seed, cfg.calibration)
    train, valid, test = normalize_splits(*split_dataset(data.dataset, SplitSpec(seed=seed)))
    return PreparedData(
        train,
        valid,
        test,
        allocate_groups(train, cfg.train_group_size, "train", seed),
        allocate_groups(valid, cfg.test_group_size, "test", seed, exhaustive=True),
        allocate_groups(test, cfg.test_group_size, "test", seed, exhaustive=cfg.exhaustive_test_groups),
    )


@dataclass
class RunResult:
    loss: str
    with_prior: EvalReport
    without_prior: EvalReport
    history: History
    model: Model


def run_loss_comparison(
    seed: int, cfg: ExperimentConfig, losses: Sequence[str] = ("pa-bce", "bce"), data: PreparedData | None = None
) -> dict[str, RunResult]:
    """Pretrain once, then fine-tune a copy per loss from the same starting point."""
    data = data or prepare_synthetic(seed, cfg)
    model_cfg = ModelConfig(
        n_continuous=data.train.x_cont.shape[1],
        vocab_sizes=list(data.train.schema.vocab_sizes),
        d_k=cfg.d_k,
        n_heads=cfg.n_heads,
        ff_width=cfg.ff_width,
        n_self_layers=cfg.n_self_layers,
        n_cross_layers=cfg.n_cross_layers,
    )
    model = Model(model_cfg, seed)
    base = TrainConfig(
        pretrain_epochs=cfg.pretrain_epochs,
        finetune_epochs=cfg.finetune_epochs,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        topk=cfg.topk,
        seed=seed,
    )
    pretrain(model, data.train, base, data.valid)
    start = model.state_dict()
    h = cfg.hash()
    results = {}
    for loss in losses:
        model.load_state_dict(start)
        tcfg = TrainConfig(**{**asdict(base), "loss": loss})
        history = finetune(model, data.train_groups, data.train, tcfg, data.valid_groups, data.valid)
        scored = score_split(model, data.test_groups, data.test)
        val_scored = score_split(model, data.valid_groups, data.valid)
        results[loss] = RunResult(
            loss,
            evaluate_with_prior(scored, data.test, seed=seed, cfg_hash=h),
            evaluate_without_prior(scored, data.test, val_scored, data.valid, seed=seed, cfg_hash=h),
            history,
            Model(model_cfg, seed),
        )
        results[loss].model.load_state_dict(model.state_dict())
    return results


def score_all(model: Model, ds: Dataset, group_size: int = 100, seed: int = 0) -> np.ndarray:
    """One score per row, from exhaustive (market, period) groups of the split."""
    groups = allocate_groups(ds, group_size, "test", seed, exhaustive=True)
    scored = score_split(model, groups, ds)
    if scored.rows.size != len(ds):
        raise DataError("exhaustive grouping left rows unscored")
    return scored.scores


@dataclass
class TwoStepComparison:
    baseline: SecondStepResult
    augmented: SecondStepResult

    @property
    def f1_delta(self) -> float:
        return self.augmented.f1 - self.baseline.f1

    @property
    def pnl_delta(self) -> float:
        return self.augmented.pnl - self.baseline.pnl


def run_two_step(
    model: Model, data: PreparedData, seed: int = 0, group_size: int = 100, balanced: bool = True
) -> TwoStepComparison:
    """Second-step classifier with and without the ranker's scores as a feature."""
    splits = (data.train, data.valid, data.test)
    scores = [score_all(model, ds, group_size, seed) for ds in splits]
    augmented = export_two_step(scores, splits)
    return TwoStepComparison(
        baseline=second_step_classifier(*splits, balanced=balanced, seed=seed),
        augmented=second_step_classifier(*augmented, balanced=balanced, seed=seed),
    )


# ---------------------------------------------------------------- gradient check


def model_gradient_check(
    seed: int,
    group_size: int = 5,
    d_k: int = 8,
    n_self_layers: int = 1,
    n_cross_layers: int = 1,
    ff_width: int = 16,
    eps: float = 1e-5,
) -> float:
    """Max relative error of the PA-BCE gradient through a small random model and group."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(
        n_continuous=3,
        vocab_sizes=[3, 2],
        d_k=d_k,
        n_heads=2,
        ff_width=ff_width,
        n_self_layers=n_self_layers,
        n_cross_layers=n_cross_layers,
    )
    model = Model(cfg, seed)
    x_cont = rng.uniform(size=(group_size, 3))
    x_cat = np.column_stack([rng.integers(0, 3, group_size), rng.integers(0, 2, group_size)])
    profits = rng.permutation(np.linspace(-50.0, 200.0, group_size) + rng.uniform(0, 1, group_size))
    members = [np.arange(group_size)]

    def loss_fn():
        scores, _ = model.score_batch(x_cont, x_cat, members)
        return pa_bce_loss([(scores.reshape(group_size), profits)])

    return gradient_check(loss_fn, model.parameters(), eps)
