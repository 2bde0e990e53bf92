"""Command-line entry point: ``riskrank <subcommand> [flags]``.

Every subcommand works inside one dataset directory (``--out``). Settings come
from a flat ``key = value`` file given with ``--config``; flags override it.
Each artifact carries the run seed and a hash of the effective configuration,
and ``manifest.json`` lists the sha256 of everything written so far.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from riskrank.data import (
    SPLIT_FILES,
    Dataset,
    IngestConfig,
    RankingGroup,
    Schema,
    SplitSpec,
    allocate_groups,
    config_hash,
    ingest_csv,
    normalize_splits,
    read_csv,
    read_groups,
    read_schema,
    split_dataset,
    write_groups,
)
from riskrank.errors import ConfigError, DataError, NumericError, RiskRankError
from riskrank.losses import LOSS_NAMES
from riskrank.metrics import build_report, classify_with_prior, classify_without_prior, per_group_rows, rank_labels
from riskrank.model import Model, ModelConfig, load_checkpoint, save_checkpoint, score_groups
from riskrank.pipeline import model_gradient_check, score_all
from riskrank.synthetic import generate_synthetic
from riskrank.train import TrainConfig, finetune, pretrain
from riskrank.twostep import export_two_step, second_step_classifier

log = logging.getLogger("riskrank")

SUBCOMMANDS = ("synth", "ingest", "split", "group", "pretrain", "train", "rank", "eval", "twostep", "gradcheck")
GRADCHECK_TOLERANCE = 1e-4
VERBOSE_ENV = "RISKRANK_VERBOSE"


@dataclass
class RunConfig:
    seed: int = 0
    # synth
    n: int = 2000
    trades: int = 200
    # ingest
    input: str = ""
    continuous: str = ""  # comma-separated column names
    categorical: str = ""
    profit_column: str = ""
    market_column: str = ""
    id_column: str = ""
    period_column: str = ""
    profit20_column: str = ""
    label_column: str = ""
    alpha: float = 1.0
    # split / group
    minority_ratio: float = 0.01
    group_size: int = 50
    test_group_size: int = 100
    exhaustive_test_groups: bool = False
    # model
    d_k: int = 64
    n_heads: int = 2
    ff_width: int = 128
    n_self_layers: int = 2
    n_cross_layers: int = 4
    dropout: float = 0.0
    # training
    loss: str = "pa-bce"
    topk: int = 20
    lr: float = 1e-4
    pretrain_epochs: int = 50
    finetune_epochs: int = 200
    batch_size: int = 32
    clip_norm: float = 5.0
    # ranking / evaluation
    split: str = "test"
    scores: str = ""  # alternative score file for eval
    with_prior: bool = True
    prior: float = 0.01

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {', '.join(LOSS_NAMES)}")
        if self.split not in SPLIT_FILES:
            raise ConfigError(f"unknown split {self.split!r}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not 0 < self.prior < 1:
            raise ConfigError("prior must lie in (0, 1)")

    def hash(self) -> str:
        return config_hash(asdict(self))

    def model_config(self, schema: Schema) -> ModelConfig:
        return ModelConfig(
            n_continuous=len(schema.continuous),
            vocab_sizes=list(schema.vocab_sizes),
            d_k=self.d_k,
            n_heads=self.n_heads,
            ff_width=self.ff_width,
            n_self_layers=self.n_self_layers,
            n_cross_layers=self.n_cross_layers,
            dropout=self.dropout,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            pretrain_epochs=self.pretrain_epochs,
            finetune_epochs=self.finetune_epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            loss=self.loss,
            topk=self.topk,
            clip_norm=self.clip_norm,
            seed=self.seed,
        )


def _coerce(name: str, kind, text: str):
    text = text.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {text!r}") from None
    return text


def read_config_file(path: str | Path) -> dict[str, object]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment line."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: malformed config ({str(exc).splitlines()[0]})") from None
    known = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for key, value in parser["run"].items():
        name = key.strip().replace("-", "_")
        if name not in known:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        out[name] = _coerce(name, known[name], value)
    return out


# ---------------------------------------------------------------- artifacts


class Workspace:
    """The dataset directory plus provenance stamping."""

    def __init__(self, root: str | Path, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.stamp = {"seed": cfg.seed, "config_hash": cfg.hash()}

    def path(self, name: str) -> Path:
        return self.root / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DataError(f"missing input {p}")
        return p

    def header(self) -> str:
        return f"# seed={self.stamp['seed']} config_hash={self.stamp['config_hash']}\n"

    def write_text(self, name: str, text: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.path(name).write_text(text)
        self._record(name)

    def write_json(self, name: str, obj: dict) -> None:
        self.write_text(name, json.dumps({**obj, **self.stamp}, indent=2, sort_keys=True) + "\n")

    def write_frame(self, name: str, frame: pd.DataFrame) -> None:
        self.write_text(name, self.header() + frame.to_csv(index=False, lineterminator="\n"))

    def write_dataset(self, name: str, ds: Dataset) -> None:
        self.write_frame(name, ds.to_frame())

    def write_schema(self, schema: Schema, name: str = "schema.json") -> None:
        stamped = Schema(**{**asdict(schema), "seed": self.cfg.seed, "config_hash": self.stamp["config_hash"]})
        self.write_text(name, stamped.to_json() + "\n")

    def write_groups(self, name: str, groups: Sequence[RankingGroup]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        write_groups(groups, self.path(name))
        text = self.path(name).read_text()
        self.write_text(name, self.header() + text)

    def _record(self, name: str) -> None:
        if name == "manifest.json":
            return
        manifest_path = self.path("manifest.json")
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"artifacts": {}}
        digest = hashlib.sha256(self.path(name).read_bytes()).hexdigest()
        manifest["artifacts"][name] = {"sha256": digest, **self.stamp}
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def schema(self) -> Schema:
        return read_schema(self.root)

    def dataset(self, name: str, schema: Schema | None = None) -> Dataset:
        return read_csv(self.require(name), schema or self.schema())

    def split(self, name: str) -> Dataset:
        return self.dataset(SPLIT_FILES[name])

    def groups(self, split: str) -> list[RankingGroup]:
        return read_groups(self.require(f"groups_{split}.jsonl"))


# ---------------------------------------------------------------- subcommands


def cmd_synth(ws: Workspace) -> None:
    data = generate_synthetic(ws.cfg.n, ws.cfg.trades, ws.cfg.seed)
    ws.write_dataset("records.csv", data.dataset)
    ws.write_schema(data.dataset.schema)
    log.info("wrote %d records (%d positive)", len(data.dataset), int(data.dataset.label.sum()))


def _names(text: str) -> list[str]:
    return [c.strip() for c in text.split(",") if c.strip()]


def cmd_ingest(ws: Workspace) -> None:
    cfg = ws.cfg
    if not cfg.input:
        raise ConfigError("ingest needs --input")
    if not cfg.continuous or not cfg.profit_column:
        raise ConfigError("ingest needs the 'continuous' and 'profit_column' config keys")
    icfg = IngestConfig(
        continuous=_names(cfg.continuous),
        profit_column=cfg.profit_column,
        categorical=_names(cfg.categorical),
        market_column=cfg.market_column or None,
        id_column=cfg.id_column or None,
        period_column=cfg.period_column or None,
        profit20_column=cfg.profit20_column or None,
        label_column=cfg.label_column or None,
        alpha=cfg.alpha,
    )
    ds = ingest_csv(cfg.input, icfg)
    ws.write_dataset("records.csv", ds)
    ws.write_schema(ds.schema)
    log.info("ingested %d records (%d positive)", len(ds), int(ds.label.sum()))


def cmd_split(ws: Workspace) -> None:
    ds = ws.dataset("records.csv")
    parts = split_dataset(ds, SplitSpec(minority_ratio=ws.cfg.minority_ratio, seed=ws.cfg.seed))
    parts = normalize_splits(*parts)
    for name, part in zip(SPLIT_FILES, parts):
        ws.write_dataset(SPLIT_FILES[name], part)
    ws.write_schema(parts[0].schema)


def cmd_group(ws: Workspace) -> None:
    cfg = ws.cfg
    train, valid, test = (ws.split(s) for s in SPLIT_FILES)
    ws.write_groups("groups_train.jsonl", allocate_groups(train, cfg.group_size, "train", cfg.seed))
    ws.write_groups(
        "groups_valid.jsonl", allocate_groups(valid, cfg.test_group_size, "test", cfg.seed, cfg.exhaustive_test_groups)
    )
    ws.write_groups(
        "groups_test.jsonl", allocate_groups(test, cfg.test_group_size, "test", cfg.seed, cfg.exhaustive_test_groups)
    )


def _write_model(ws: Workspace, model: Model, stem: str, extra: dict) -> None:
    ws.root.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ws.path(f"{stem}.ckpt"))
    ws._record(f"{stem}.ckpt")
    ws.write_json(f"{stem}.json", {"model": asdict(model.config), **extra})


def cmd_pretrain(ws: Workspace) -> None:
    schema = ws.schema()
    train, valid = ws.split("train"), ws.split("valid")
    model = Model(ws.cfg.model_config(schema), ws.cfg.seed)
    history = pretrain(model, train, ws.cfg.train_config(), valid)
    _write_model(ws, model, "pretrained", {"stage": "pretrain", "best_epoch": history.best_epoch})
    epochs = list(range(1, len(history.losses) + 1))
    aucs = history.val_auc + [math.nan] * (len(epochs) - len(history.val_auc))
    ws.write_frame("pretrain_log.csv", pd.DataFrame({"epoch": epochs, "loss": history.losses, "val_auc": aucs}))


def cmd_train(ws: Workspace) -> None:
    schema = ws.schema()
    mcfg = ws.cfg.model_config(schema)
    if ws.path("pretrained.ckpt").exists():
        model = load_checkpoint(ws.path("pretrained.ckpt"), mcfg)
        log.info("starting from pretrained.ckpt")
    else:
        model = Model(mcfg, ws.cfg.seed)
    train, valid = ws.split("train"), ws.split("valid")
    history = finetune(model, ws.groups("train"), train, ws.cfg.train_config(), ws.groups("valid"), valid)
    if not all(np.isfinite(history.losses)):
        raise NumericError("non-finite training loss")
    _write_model(ws, model, "model", {"stage": "finetune", "loss": ws.cfg.loss, "best_epoch": history.best_epoch})
    epochs = list(range(1, len(history.losses) + 1))
    frame = pd.DataFrame(
        {"epoch": epochs, "loss": history.losses, "val_ndcg10": history.val_ndcg10, "val_mrr": history.val_mrr}
    )
    ws.write_frame("train_log.csv", frame)


def _load_model(ws: Workspace) -> Model:
    return load_checkpoint(ws.require("model.ckpt"), ws.cfg.model_config(ws.schema()))


def _scores_frame(ds: Dataset, groups: Sequence[RankingGroup], per_group: Sequence[np.ndarray]) -> pd.DataFrame:
    rows, gids, scores, seen = [], [], [], set()
    for g, s in zip(groups, per_group):
        for r, v in zip(g.members, s):
            if int(r) not in seen:
                seen.add(int(r))
                rows.append(int(r))
                gids.append(g.group_id)
                scores.append(float(v))
    order = np.argsort(rows, kind="stable")
    rows_a = np.asarray(rows, dtype=np.int64)[order]
    return pd.DataFrame(
        {
            "row": rows_a,
            "account_id": ds.account_id[rows_a],
            "period": ds.period[rows_a],
            "group_id": np.asarray(gids, dtype=np.int64)[order],
            "score": np.asarray(scores)[order],
        }
    )


def cmd_rank(ws: Workspace) -> None:
    model = _load_model(ws)
    ds = ws.split(ws.cfg.split)
    groups = ws.groups(ws.cfg.split)
    frame = _scores_frame(ds, groups, score_groups(groups, ds, model))
    if not np.isfinite(frame["score"]).all():
        raise NumericError("non-finite ranking score")
    ws.write_frame(f"scores_{ws.cfg.split}.csv", frame)


def read_scores(path: Path, n_rows: int) -> np.ndarray:
    """Row-aligned score vector (NaN where a row was not scored)."""
    if not path.exists():
        raise DataError(f"missing input {path}")
    frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    for col in ("row", "score"):
        if col not in frame.columns:
            raise DataError(f"{path}: missing column {col!r}")
    rows = frame["row"].to_numpy(dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows):
        raise DataError(f"{path}: row index outside the split")
    out = np.full(n_rows, np.nan)
    out[rows] = frame["score"].to_numpy(dtype=np.float64)
    return out


def _ranked(groups: Sequence[RankingGroup], ds: Dataset, scores: np.ndarray) -> list[np.ndarray]:
    ranked = []
    for g in groups:
        s = scores[g.members]
        if np.isnan(s).any():
            raise DataError(f"group {g.group_id} has unscored members")
        ranked.append(rank_labels(s, ds.label[g.members]))
    return ranked


def cmd_eval(ws: Workspace) -> None:
    cfg = ws.cfg
    test = ws.split("test")
    groups = ws.groups("test")
    scores = read_scores(Path(cfg.scores) if cfg.scores else ws.path("scores_test.csv"), len(test))
    ranked = _ranked(groups, test, scores)
    rows = np.flatnonzero(~np.isnan(scores))
    s = scores[rows]
    threshold = None
    if cfg.with_prior:
        preds = classify_with_prior(s, cfg.prior, np.column_stack([test.account_id[rows], test.period[rows]]))
        regime = "with-prior"
    else:
        valid = ws.split("valid")
        vs = read_scores(ws.path("scores_valid.csv"), len(valid))
        vrows = np.flatnonzero(~np.isnan(vs))
        threshold, preds = classify_without_prior(vs[vrows], valid.label[vrows], s)
        regime = "without-prior"
    report = build_report(
        regime,
        ranked,
        s,
        test.label[rows],
        test.next_profit_20[rows],
        preds,
        threshold=threshold,
        seed=cfg.seed,
        config_hash=ws.stamp["config_hash"],
    )
    ws.write_text("report.json", report.to_json() + "\n")
    ws.write_text("report.txt", ws.header() + report.to_table())
    ws.write_frame("per_group.csv", pd.DataFrame(per_group_rows([g.group_id for g in groups], ranked)))
    print(report.to_table(), end="")


def cmd_twostep(ws: Workspace) -> None:
    model = _load_model(ws)
    splits = [ws.split(s) for s in SPLIT_FILES]
    scores = [score_all(model, ds, ws.cfg.test_group_size, ws.cfg.seed) for ds in splits]
    augmented = export_two_step(scores, splits)
    for name, ds in zip(SPLIT_FILES, augmented):
        ws.write_dataset(f"twostep_{SPLIT_FILES[name]}", ds)
    ws.write_schema(augmented[0].schema, "twostep_schema.json")
    baseline = second_step_classifier(*splits, seed=ws.cfg.seed)
    result = second_step_classifier(*augmented, seed=ws.cfg.seed)

    def summary(r):
        return {
            "threshold": r.threshold,
            "f1": r.f1,
            "pnl": r.pnl,
            "coef": r.coef,
            "importance_ascending": [[k, v] for k, v in r.ascending_importance()],
        }

    ws.write_json(
        "twostep.json",
        {
            "baseline": summary(baseline),
            "augmented": summary(result),
            "f1_delta": result.f1 - baseline.f1,
            "pnl_delta": result.pnl - baseline.pnl,
        },
    )
    print(f"f1 {baseline.f1:.4f} -> {result.f1:.4f}  pnl {baseline.pnl:.3f} -> {result.pnl:.3f}")


def cmd_gradcheck(ws: Workspace) -> None:
    err = model_gradient_check(ws.cfg.seed)
    print(f"max relative error {err:.3e}")
    if not err < GRADCHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: {err:.3e} >= {GRADCHECK_TOLERANCE:g}")


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "group": cmd_group,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "rank": cmd_rank,
    "eval": cmd_eval,
    "twostep": cmd_twostep,
    "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="riskrank", description="Profit-aware ranking of risky traders.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="flat key=value settings file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", default=".", help="dataset directory (default: current)")
    parser.add_argument("--n", type=int, help="synthetic traders")
    parser.add_argument("--trades", type=int, help="synthetic trades per trader")
    parser.add_argument("--input", help="CSV file for ingest")
    parser.add_argument("--group-size", "--size", dest="group_size", type=int)
    parser.add_argument("--test-group-size", type=int)
    parser.add_argument("--exhaustive-test-groups", action="store_const", const=True, default=None)
    parser.add_argument("--loss", choices=LOSS_NAMES)
    parser.add_argument("--topk", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--epochs", dest="finetune_epochs", type=int)
    parser.add_argument("--pretrain-epochs", type=int)
    parser.add_argument("--split", choices=tuple(SPLIT_FILES))
    parser.add_argument("--scores", help="score CSV for eval (default: scores_test.csv)")
    prior = parser.add_mutually_exclusive_group()
    prior.add_argument("--with-prior", dest="with_prior", action="store_const", const=True, default=None)
    prior.add_argument("--without-prior", dest="with_prior", action="store_const", const=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict[str, object] = read_config_file(args.config) if args.config else {}
    known = {f.name for f in fields(RunConfig)}
    for key, value in vars(args).items():
        if key in known and value is not None:
            values[key] = value
    return RunConfig(**values)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        verbose = args.verbose or os.environ.get(VERBOSE_ENV, "") not in ("", "0")
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = resolve_config(args)
        COMMANDS[args.subcommand](Workspace(args.out, cfg))
    except RiskRankError as exc:
        kind = type(exc).__name__
        msg = " ".join(str(exc).split())
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: NumericError: {' '.join(str(exc).split())}", file=sys.stderr)
        return NumericError.exit_code
    except OSError as exc:
        print(f"error: DataError: {' '.join(str(exc).split())}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
