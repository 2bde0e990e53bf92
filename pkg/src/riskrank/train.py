"""Two-step training: classification pretraining of the self-trader stack, then ranking fine-tuning."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from riskrank import autodiff as ad
from riskrank.autodiff import OptimizerState, Parameter
from riskrank.data import Dataset, RankingGroup
from riskrank.errors import ConfigError, DataError
from riskrank.losses import LOSS_NAMES, batch_loss, topk_sample
from riskrank.metrics import auc, mean_ndcg, mrr, rank_labels
from riskrank.model import Model, save_checkpoint, score_groups

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,loss,val_ndcg10,val_mrr,seconds"


@dataclass
class TrainConfig:
    pretrain_epochs: int = 50
    finetune_epochs: int = 200
    lr: float = 1e-4
    pretrain_lr: float | None = None  # defaults to lr
    batch_size: int = 32  # groups per optimizer step
    pretrain_batch_size: int = 256  # records per optimizer step
    pretrain_patience: int = 10
    loss: str = "pa-bce"
    topk: int = 20
    reduction: str = "sum"
    pos_weight: float = 10.0
    clip_norm: float = 5.0
    seed: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.finetune_epochs < 1 or self.pretrain_epochs < 0:
            raise ConfigError("epochs must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.loss not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {', '.join(LOSS_NAMES)}")
        if self.topk < 2:
            raise ConfigError("top-K needs k >= 2")


@dataclass
class History:
    losses: list[float] = field(default_factory=list)
    val_ndcg10: list[float] = field(default_factory=list)
    val_mrr: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    initial_loss: float | None = None
    best_epoch: int | None = None

    def log_lines(self) -> list[str]:
        return [
            f"{e + 1},{l!r},{n!r},{m!r}"
            for e, (l, n, m) in enumerate(zip(self.losses, self.val_ndcg10, self.val_mrr))
        ]


def _step(params: Sequence[Parameter], state: OptimizerState, clip: float) -> None:
    if clip > 0:
        ad.clip_grad_norm(params, clip)
    ad.adam_step(params, state)


def validation_ranking(model: Model, groups: Sequence[RankingGroup], ds: Dataset) -> tuple[float, float]:
    """(mean NDCG@10, MRR) of the model over groups with at least one positive."""
    scores = score_groups(groups, ds, model)
    ranked = [rank_labels(s, ds.label[g.members]) for g, s in zip(groups, scores)]
    try:
        m = mrr(ranked)
    except DataError:
        m = float("nan")
    return mean_ndcg(ranked, 10), m


# ---------------------------------------------------------------- pretraining


def _pretrain_head(model: Model, seed: int) -> dict[str, Parameter]:
    d = model.config.d_k
    rng = np.random.default_rng([seed, 2])
    bound = 1.0 / np.sqrt(d)
    return {
        "pretrain.ln.gain": Parameter(np.ones(d), "pretrain.ln.gain"),
        "pretrain.ln.bias": Parameter(np.zeros(d), "pretrain.ln.bias"),
        "pretrain.weight": Parameter(rng.uniform(-bound, bound, (d, 1)), "pretrain.weight"),
        "pretrain.bias": Parameter(np.zeros(1), "pretrain.bias"),
    }


def _classify(model: Model, head: dict[str, Parameter], x_cont, x_cat):
    cls = model.encode_traders(x_cont, x_cat)
    h = ad.layer_norm(cls, head["pretrain.ln.gain"], head["pretrain.ln.bias"])
    out = h @ head["pretrain.weight"] + head["pretrain.bias"]
    return out.reshape(out.shape[0])


def pretrain_parameters(model: Model) -> list[Parameter]:
    return [p for k, p in model.params.items() if k.startswith(("embed.", "cls", "self."))]


def pretrain(
    model: Model,
    train: Dataset,
    config: TrainConfig,
    valid: Dataset | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> History:
    """Fit embeddings and the self-trader stack on per-record risky classification.

    A temporary classification head sits on the CLS vector and is discarded
    afterwards. With a validation set holding both classes, the parameters with
    the best validation AUC are kept and training stops after
    ``pretrain_patience`` epochs without improvement.
    """
    if train.label.sum() == 0:
        raise DataError("pretraining needs at least one positive record")
    history = History()
    if config.pretrain_epochs == 0:
        return history
    head = _pretrain_head(model, config.seed)
    params = pretrain_parameters(model) + list(head.values())
    state = OptimizerState(lr=config.pretrain_lr or config.lr)
    rng = np.random.default_rng([config.seed, 3])
    can_validate = valid is not None and 0 < valid.label.sum() < len(valid)
    best_auc, best_state, stale = -np.inf, None, 0
    model.training = True
    try:
        for epoch in range(config.pretrain_epochs):
            order = rng.permutation(len(train))
            total = 0.0
            for start in range(0, len(order), config.pretrain_batch_size):
                rows = order[start : start + config.pretrain_batch_size]
                ad.zero_grad(params)
                logits = _classify(model, head, train.x_cont[rows], train.x_cat[rows])
                loss = batch_loss("bce", logits, None, train.label[rows], None, reduction="sum") * (1.0 / len(rows))
                ad.backward(loss)
                _step(params, state, config.clip_norm)
                total += loss.item() * len(rows)
            history.losses.append(total / len(train))
            val_auc = float("nan")
            if can_validate:
                model.training = False
                with ad.no_grad():
                    val_logits = _classify(model, head, valid.x_cont, valid.x_cat).data
                model.training = True
                val_auc = auc(val_logits, valid.label)
                if val_auc > best_auc:
                    best_auc, stale = val_auc, 0
                    best_state = {p.name: p.data.copy() for p in pretrain_parameters(model)}
                    history.best_epoch = epoch
                else:
                    stale += 1
            history.val_auc.append(val_auc)
            if on_epoch:
                on_epoch(epoch, history.losses[-1], val_auc)
            if can_validate and stale >= config.pretrain_patience:
                break
    finally:
        model.training = False
    if best_state is not None:
        model.load_state_dict({**model.state_dict(), **best_state})
    return history


# ---------------------------------------------------------------- fine-tuning


def _batch_arrays(groups: Sequence[RankingGroup], ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    n_max = max(len(g) for g in groups)
    profits = np.zeros((len(groups), n_max))
    labels = np.zeros((len(groups), n_max))
    for b, g in enumerate(groups):
        profits[b, : len(g)] = ds.next_total_pl[g.members]
        labels[b, : len(g)] = ds.label[g.members]
    return profits, labels


def group_batch_loss(model: Model, groups: Sequence[RankingGroup], ds: Dataset, config: TrainConfig):
    scores, mask = model.score_batch(ds.x_cont, ds.x_cat, [g.members for g in groups])
    profits, labels = _batch_arrays(groups, ds)
    return batch_loss(config.loss, scores, profits, labels, mask, config.reduction, config.pos_weight)


def finetune(
    model: Model,
    train_groups: Sequence[RankingGroup],
    train: Dataset,
    config: TrainConfig,
    valid_groups: Sequence[RankingGroup] | None = None,
    valid: Dataset | None = None,
    log_file: TextIO | None = None,
    initial_loss: bool = False,
    on_epoch: Callable[[int, Model], None] | None = None,
) -> History:
    """Train every parameter on the configured group loss over top-K sampled groups.

    When validation groups are given, the parameters with the best validation
    NDCG@10 are restored at the end (and written to ``checkpoint_path``).
    """
    if not train_groups:
        raise DataError("no training groups")
    groups = [topk_sample(g, train, config.topk) for g in train_groups]
    params = model.parameters()
    state = OptimizerState(lr=config.lr)
    rng = np.random.default_rng([config.seed, 4])
    history = History()
    if log_file is not None:
        log_file.write(LOG_HEADER + "\n")

    if initial_loss:
        with ad.no_grad():
            history.initial_loss = sum(
                group_batch_loss(model, groups[s : s + config.batch_size], train, config).item()
                for s in range(0, len(groups), config.batch_size)
            )

    best_ndcg, best_state = -np.inf, None
    for epoch in range(config.finetune_epochs):
        started = time.perf_counter()
        model.training = True
        order = rng.permutation(len(groups))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [groups[i] for i in order[start : start + config.batch_size]]
            model.zero_grad()
            loss = group_batch_loss(model, batch, train, config)
            ad.backward(loss)
            _step(params, state, config.clip_norm)
            total += loss.item()
        model.training = False
        history.losses.append(total)
        ndcg10, val_mrr = float("nan"), float("nan")
        if valid_groups:
            ndcg10, val_mrr = validation_ranking(model, valid_groups, valid)
            if ndcg10 >= best_ndcg:
                best_ndcg = ndcg10
                best_state = model.state_dict()
                history.best_epoch = epoch
        history.val_ndcg10.append(ndcg10)
        history.val_mrr.append(val_mrr)
        if on_epoch:
            on_epoch(epoch, model)
        line = f"{epoch + 1},{total!r},{ndcg10!r},{val_mrr!r},{time.perf_counter() - started:.3f}"
        log.debug(line)
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()
    if best_state is not None:
        model.load_state_dict(best_state)
    if config.checkpoint_path:
        save_checkpoint(model, config.checkpoint_path)
    return history
