"""Trader records, labelling, splits, ranking-group allocation and dataset IO."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from riskrank.errors import ConfigError, DataError

ID_COLUMNS = ("account_id", "period")
TARGET_COLUMNS = ("next_total_pl", "next_profit_20", "label")


# ---------------------------------------------------------------- schema & records


@dataclass
class Schema:
    continuous: list[str]
    categorical: list[str]
    vocab_sizes: list[int]
    market_column: str | None = None
    norm_min: list[float] | None = None
    norm_max: list[float] | None = None
    seed: int | None = None
    config_hash: str | None = None

    def __post_init__(self):
        if len(self.vocab_sizes) != len(self.categorical):
            raise ConfigError("one vocabulary size is needed per categorical feature")
        if self.market_column is not None and self.market_column not in self.categorical:
            raise ConfigError(f"market column {self.market_column!r} must be categorical")

    @property
    def market_index(self) -> int | None:
        if self.market_column is None:
            return None
        return self.categorical.index(self.market_column)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Schema":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class TraderRecord:
    account_id: int
    period: int
    continuous_features: np.ndarray
    categorical_features: np.ndarray
    next_total_pl: float
    next_profit_20: float
    label: int
    market_cluster: int = 0


@dataclass
class Dataset:
    """Columnar table of trader-period rows sharing one schema."""

    schema: Schema
    account_id: np.ndarray
    period: np.ndarray
    x_cont: np.ndarray
    x_cat: np.ndarray
    next_total_pl: np.ndarray
    next_profit_20: np.ndarray
    label: np.ndarray
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.account_id)
        self.account_id = np.asarray(self.account_id, dtype=np.int64)
        self.period = np.asarray(self.period, dtype=np.int64)
        self.x_cont = np.asarray(self.x_cont, dtype=np.float64).reshape(n, len(self.schema.continuous))
        self.x_cat = np.asarray(self.x_cat, dtype=np.int64).reshape(n, len(self.schema.categorical))
        self.next_total_pl = np.asarray(self.next_total_pl, dtype=np.float64)
        self.next_profit_20 = np.asarray(self.next_profit_20, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.int64)
        for name in ("period", "x_cont", "x_cat", "next_total_pl", "next_profit_20", "label"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        for name in ("x_cont", "next_total_pl", "next_profit_20"):
            bad = ~np.isfinite(getattr(self, name))
            if bad.any():
                row = int(np.argwhere(bad)[0][0])
                raise DataError(f"row {row}: non-finite value in {name}")
        if n and not np.isin(self.label, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        vocab = np.asarray(self.schema.vocab_sizes, dtype=np.int64)
        if n and vocab.size and ((self.x_cat < 0) | (self.x_cat >= vocab)).any():
            row, col = np.argwhere((self.x_cat < 0) | (self.x_cat >= vocab))[0]
            raise DataError(
                f"row {row}: {self.schema.categorical[col]}={self.x_cat[row, col]} "
                f"outside vocabulary of size {vocab[col]}"
            )

    def __len__(self) -> int:
        return len(self.account_id)

    @property
    def market(self) -> np.ndarray:
        idx = self.schema.market_index
        if idx is None:
            return np.zeros(len(self), dtype=np.int64)
        return self.x_cat[:, idx]

    def record(self, i: int) -> TraderRecord:
        return TraderRecord(
            account_id=int(self.account_id[i]),
            period=int(self.period[i]),
            continuous_features=self.x_cont[i].copy(),
            categorical_features=self.x_cat[i].copy(),
            next_total_pl=float(self.next_total_pl[i]),
            next_profit_20=float(self.next_profit_20[i]),
            label=int(self.label[i]),
            market_cluster=int(self.market[i]),
        )

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            schema=self.schema,
            account_id=self.account_id[rows],
            period=self.period[rows],
            x_cont=self.x_cont[rows],
            x_cat=self.x_cat[rows],
            next_total_pl=self.next_total_pl[rows],
            next_profit_20=self.next_profit_20[rows],
            label=self.label[rows],
            extra={k: v[rows] for k, v in self.extra.items()},
        )

    def with_schema(self, schema: Schema) -> "Dataset":
        return replace(self, schema=schema)

    def to_frame(self) -> pd.DataFrame:
        cols: dict[str, np.ndarray] = {"account_id": self.account_id, "period": self.period}
        for j, name in enumerate(self.schema.continuous):
            cols[name] = self.x_cont[:, j]
        for j, name in enumerate(self.schema.categorical):
            cols[name] = self.x_cat[:, j]
        cols["next_total_pl"] = self.next_total_pl
        cols["next_profit_20"] = self.next_profit_20
        cols["label"] = self.label
        cols.update(self.extra)
        return pd.DataFrame(cols)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: Schema) -> "Dataset":
        needed = [*ID_COLUMNS, *schema.continuous, *schema.categorical, *TARGET_COLUMNS]
        missing = [c for c in needed if c not in frame.columns]
        if missing:
            raise DataError(f"missing column {missing[0]!r}")
        known = set(needed)
        extra = {c: frame[c].to_numpy() for c in frame.columns if c not in known}
        return cls(
            schema=schema,
            account_id=frame["account_id"].to_numpy(),
            period=frame["period"].to_numpy(),
            x_cont=frame[schema.continuous].to_numpy(dtype=np.float64),
            x_cat=frame[schema.categorical].to_numpy(dtype=np.int64),
            next_total_pl=frame["next_total_pl"].to_numpy(dtype=np.float64),
            next_profit_20=frame["next_profit_20"].to_numpy(dtype=np.float64),
            label=frame["label"].to_numpy(dtype=np.int64),
            extra=extra,
        )


# ---------------------------------------------------------------- ledger & labels


@dataclass
class TradeLedger:
    """Per-account trade P&L and margin, trades numbered from 1."""

    pnl: dict[int, np.ndarray]
    margin: dict[int, np.ndarray]

    def __post_init__(self):
        for acct, m in self.margin.items():
            m = np.asarray(m, dtype=np.float64)
            if (m <= 0).any():
                raise DataError(f"account {acct}: margins must be strictly positive")
            if len(m) != len(self.pnl[acct]):
                raise DataError(f"account {acct}: pnl and margin lengths differ")

    def n_trades(self, account_id: int) -> int:
        return len(self.pnl[account_id])


def compute_return(ledger: TradeLedger, account_id: int, trade_index: int, window: int = 100) -> float:
    """Future return over trades ``trade_index+1 .. trade_index+window``."""
    if account_id not in ledger.pnl:
        raise DataError(f"unknown account {account_id}")
    if window < 1:
        raise ConfigError("window must be at least 1")
    if trade_index < 0 or trade_index + window > ledger.n_trades(account_id):
        raise DataError(
            f"account {account_id}: fewer than {window} trades after trade {trade_index}"
        )
    pnl = np.asarray(ledger.pnl[account_id][trade_index : trade_index + window], dtype=np.float64)
    margin = np.asarray(ledger.margin[account_id][trade_index : trade_index + window], dtype=np.float64)
    total_margin = margin.sum()
    if total_margin == 0:
        raise DataError(f"account {account_id}: zero total margin")
    return float(pnl.sum() / total_margin)


def top_alpha(values: np.ndarray, alpha: float, tiebreak: np.ndarray | None = None) -> np.ndarray:
    """0/1 mask of the ceil(alpha% * N) largest values; ties go to the smaller tiebreak key.

    ``tiebreak`` may be 1-D or 2-D (columns compared lexicographically).
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n == 0:
        raise DataError("cannot label an empty set")
    if not 0 < alpha < 100:
        raise ConfigError("alpha must lie in (0, 100)")
    if tiebreak is None:
        tiebreak = np.arange(n)
    keys = np.asarray(tiebreak)
    if keys.ndim == 1:
        keys = keys[:, None]
    # lexsort: last key is primary
    order = np.lexsort(tuple(keys[:, c] for c in range(keys.shape[1] - 1, -1, -1)) + (-values,))
    k = math.ceil(round(alpha / 100.0 * n, 9))
    out = np.zeros(n, dtype=np.int64)
    out[order[:k]] = 1
    return out


def assign_labels(returns: Mapping[tuple[int, int], float], alpha: float = 1.0) -> dict[tuple[int, int], int]:
    """Label the top alpha% of returns as risky (1), ties broken by (account, trade) ascending."""
    if not returns:
        raise DataError("cannot label an empty set")
    keys = list(returns)
    vals = np.array([returns[k] for k in keys], dtype=np.float64)
    mask = top_alpha(vals, alpha, np.array(keys, dtype=np.int64))
    return {k: int(m) for k, m in zip(keys, mask)}


# ---------------------------------------------------------------- normalization


def fit_minmax(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise DataError("cannot fit normalization on an empty split")
    return x.min(axis=0), x.max(axis=0)


def apply_minmax(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; zero-range columns map to 0, out-of-range values are clipped."""
    x = np.asarray(x, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - lo) / safe, 0.0)
    return np.clip(out, 0.0, 1.0)


def normalize_splits(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Fit min-max on ``train`` and apply to every split; parameters land in the schema."""
    lo, hi = fit_minmax(train.x_cont)
    schema = replace(train.schema, norm_min=lo.tolist(), norm_max=hi.tolist())
    out = []
    for ds in (train, *others):
        scaled = replace(ds, schema=schema, x_cont=apply_minmax(ds.x_cont, lo, hi))
        out.append(scaled)
    return out


# ---------------------------------------------------------------- splitting


@dataclass
class SplitSpec:
    train: float = 0.70
    valid: float = 0.10
    test: float = 0.20
    minority_ratio: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if abs(self.train + self.valid + self.test - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if not 0 < self.minority_ratio < 1:
            raise ConfigError("minority ratio must lie in (0, 1)")


def _split_counts(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = int(round(n * spec.train))
    n_valid = int(round(n * spec.valid))
    return n_train, n_valid, n - n_train - n_valid


def split_dataset(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/valid/test split at the configured minority ratio."""
    pos = np.flatnonzero(ds.label == 1)
    neg = np.flatnonzero(ds.label == 0)
    if pos.size == 0:
        raise DataError("no positive records to split")
    rng = np.random.default_rng(spec.seed)
    pos = rng.permutation(pos)
    neg = rng.permutation(neg)

    r = spec.minority_ratio
    if pos.size / (pos.size + neg.size) > r + 1e-12:
        keep = max(3, int(round(neg.size * r / (1 - r))))
        pos = pos[:keep]
    else:
        keep = int(round(pos.size * (1 - r) / r))
        neg = neg[:keep]

    p_counts = _split_counts(pos.size, spec)
    if min(p_counts) < 1:
        raise DataError(f"{pos.size} positives cannot place one in every split")
    n_counts = _split_counts(neg.size, spec)

    parts = []
    p_start = n_start = 0
    for pc, nc in zip(p_counts, n_counts):
        rows = np.concatenate([pos[p_start : p_start + pc], neg[n_start : n_start + nc]])
        p_start += pc
        n_start += nc
        parts.append(ds.subset(np.sort(rows)))
    return parts[0], parts[1], parts[2]


# ---------------------------------------------------------------- group allocation


@dataclass
class RankingGroup:
    group_id: int
    market_cluster: int
    period: int
    members: np.ndarray  # row indices into the split's Dataset

    def __len__(self) -> int:
        return len(self.members)

    def to_json(self) -> str:
        return json.dumps(
            {
                "group_id": self.group_id,
                "market": self.market_cluster,
                "period": self.period,
                "members": [int(m) for m in self.members],
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "RankingGroup":
        d = json.loads(line)
        return cls(d["group_id"], d["market"], d["period"], np.asarray(d["members"], dtype=np.int64))


def sort_by_profit(group: RankingGroup, ds: Dataset) -> RankingGroup:
    """Members reordered by next_total_pl descending, ties by account id."""
    m = group.members
    order = np.lexsort((ds.account_id[m], -ds.next_total_pl[m]))
    return replace(group, members=m[order])


def allocate_groups(
    ds: Dataset,
    group_size: int,
    mode: str = "train",
    seed: int = 0,
    exhaustive: bool = False,
) -> list[RankingGroup]:
    """Ranking group allocation per (market, period) cell.

    Train mode pairs one risky trader with up to ``group_size - 1`` normal ones
    until either pool is empty. Test mode samples ``group_size - 1`` records once
    per cell, or, with ``exhaustive``, chunks the whole cell into groups of at
    most ``group_size``.
    """
    if group_size < 2:
        raise ConfigError("group size must be at least 2")
    if mode not in ("train", "test"):
        raise ConfigError(f"unknown allocation mode {mode!r}")
    markets = ds.market
    groups: list[RankingGroup] = []
    for market in np.unique(markets):
        in_market = markets == market
        for period in np.unique(ds.period[in_market]):
            cell = np.flatnonzero(in_market & (ds.period == period))
            rng = np.random.default_rng([seed, int(market), int(period)])
            if mode == "train":
                risky = list(cell[ds.label[cell] == 1])
                normal = list(cell[ds.label[cell] == 0])
                while risky and normal:
                    pick = risky.pop(int(rng.integers(len(risky))))
                    take = min(len(normal), group_size - 1)
                    chosen = sorted(rng.choice(len(normal), size=take, replace=False), reverse=True)
                    members = [pick] + [normal.pop(i) for i in chosen]
                    groups.append(RankingGroup(len(groups), int(market), int(period), np.array(members)))
            elif exhaustive:
                shuffled = rng.permutation(cell)
                for start in range(0, len(shuffled), group_size):
                    chunk = shuffled[start : start + group_size]
                    groups.append(RankingGroup(len(groups), int(market), int(period), chunk))
            else:
                take = min(len(cell), group_size - 1)
                if take == 0:
                    continue
                chunk = rng.choice(cell, size=take, replace=False)
                groups.append(RankingGroup(len(groups), int(market), int(period), chunk))
    return groups


# ---------------------------------------------------------------- CSV ingestion


@dataclass
class IngestConfig:
    """Column mapping for a public CSV; the profit column doubles as the labelling proxy."""

    continuous: list[str]
    profit_column: str
    categorical: list[str] = field(default_factory=list)
    vocab_sizes: list[int] | None = None
    market_column: str | None = None
    id_column: str | None = None
    period_column: str | None = None
    profit20_column: str | None = None
    label_column: str | None = None
    alpha: float = 1.0


def _numeric(frame: pd.DataFrame, col: str) -> np.ndarray:
    values = pd.to_numeric(frame[col], errors="coerce")
    bad = values.isna() & frame[col].notna() | frame[col].isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        # +2: header line plus 1-based numbering
        raise DataError(f"column {col!r}: unparseable value {frame[col].iloc[row]!r} at line {row + 2}")
    return values.to_numpy(dtype=np.float64)


def ingest_csv(path: str | Path, cfg: IngestConfig) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""], encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"{path}: empty file") from exc
    if frame.empty:
        raise DataError(f"{path}: no data rows")
    wanted = [*cfg.continuous, *cfg.categorical, cfg.profit_column]
    wanted += [c for c in (cfg.id_column, cfg.period_column, cfg.profit20_column, cfg.label_column) if c]
    for col in wanted:
        if col not in frame.columns:
            raise DataError(f"missing column {col!r}")

    n = len(frame)
    x_cont = np.column_stack([_numeric(frame, c) for c in cfg.continuous]) if cfg.continuous else np.zeros((n, 0))
    cat_vals = [_numeric(frame, c) for c in cfg.categorical]
    for c, v in zip(cfg.categorical, cat_vals):
        if (v != np.round(v)).any() or (v < 0).any():
            raise DataError(f"categorical column {c!r} must hold non-negative integers")
    x_cat = np.column_stack(cat_vals).astype(np.int64) if cat_vals else np.zeros((n, 0), dtype=np.int64)
    vocab = cfg.vocab_sizes or [int(x_cat[:, j].max()) + 1 for j in range(x_cat.shape[1])]

    profit = _numeric(frame, cfg.profit_column)
    profit20 = _numeric(frame, cfg.profit20_column) if cfg.profit20_column else profit.copy()
    account = _numeric(frame, cfg.id_column).astype(np.int64) if cfg.id_column else np.arange(n)
    period = _numeric(frame, cfg.period_column).astype(np.int64) if cfg.period_column else np.zeros(n, dtype=np.int64)
    if cfg.label_column:
        label = _numeric(frame, cfg.label_column).astype(np.int64)
    else:
        label = top_alpha(profit, cfg.alpha, np.column_stack([account, period]))

    schema = Schema(
        continuous=list(cfg.continuous),
        categorical=list(cfg.categorical),
        vocab_sizes=list(vocab),
        market_column=cfg.market_column,
    )
    return Dataset(schema, account, period, x_cont, x_cat, profit, profit20, label)


# ---------------------------------------------------------------- dataset directory


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_csv(ds: Dataset, path: str | Path) -> None:
    ds.to_frame().to_csv(path, index=False, lineterminator="\n")


def read_csv(path: str | Path, schema: Schema) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    return Dataset.from_frame(pd.read_csv(path, comment="#", float_precision="round_trip"), schema)


def write_schema(schema: Schema, directory: str | Path) -> None:
    Path(directory, "schema.json").write_text(schema.to_json() + "\n")


def read_schema(directory: str | Path) -> Schema:
    path = Path(directory, "schema.json")
    if not path.exists():
        raise DataError(f"no schema.json in {directory}")
    return Schema.from_json(path.read_text())


def write_groups(groups: Sequence[RankingGroup], path: str | Path) -> None:
    with open(path, "w") as fh:
        for g in groups:
            fh.write(g.to_json() + "\n")


def read_groups(path: str | Path) -> list[RankingGroup]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path) as fh:
        return [RankingGroup.from_json(line) for line in fh if line.strip() and not line.startswith("#")]


SPLIT_FILES = {"train": "train.csv", "valid": "valid.csv", "test": "test.csv"}


def load_split(directory: str | Path, name: str) -> Dataset:
    schema = read_schema(directory)
    return read_csv(Path(directory, SPLIT_FILES[name]), schema)
