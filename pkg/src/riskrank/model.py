"""Self/cross-trader attention ranker.

Each trader becomes a token sequence ``[CLS, e_1, ..., e_k]`` (one token per
feature). A stack of pre-norm transformer blocks mixes the tokens of one
trader; its CLS row summarizes the trader. A second stack attends across the
CLS rows of all traders in a ranking group, and a linear head turns each
contextualized row into a score.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from riskrank import autodiff as ad
from riskrank.autodiff import Parameter, Tensor
from riskrank.data import Dataset, RankingGroup, TraderRecord
from riskrank.errors import ConfigError, DataError

MASK_FILL = -1e30


@dataclass
class ModelConfig:
    n_continuous: int
    vocab_sizes: list[int] = field(default_factory=list)
    d_k: int = 64
    n_heads: int = 2
    ff_width: int = 128
    n_self_layers: int = 2
    n_cross_layers: int = 4
    dropout: float = 0.0
    activation: str = "gelu"

    def __post_init__(self):
        if self.d_k % self.n_heads:
            raise ConfigError(f"d_k={self.d_k} is not divisible by n_heads={self.n_heads}")
        if self.n_self_layers < 1 or self.n_cross_layers < 1:
            raise ConfigError("need at least one self and one cross layer")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_continuous + len(self.vocab_sizes)

    def parameter_count(self) -> int:
        d, f = self.d_k, self.ff_width
        n_cat = len(self.vocab_sizes)
        embed = 2 * self.n_continuous * d + (sum(self.vocab_sizes) + n_cat + 1) * d
        block = 4 * d * d + 2 * d * f + f + 5 * d
        head = 3 * d + 1
        return embed + (self.n_self_layers + self.n_cross_layers) * block + head


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.training = False
        self._dropout_rng = np.random.default_rng([seed, 1])
        rng = np.random.default_rng(seed)
        d, f = config.d_k, config.ff_width
        p: dict[str, Parameter] = {}

        def add(name, value):
            p[name] = Parameter(value, name)

        add("embed.num.weight", _uniform(rng, (config.n_continuous, d), d))
        # biases drawn like the weights so no token starts with zero spread under layer norm
        add("embed.num.bias", _uniform(rng, (config.n_continuous, d), d))
        for j, size in enumerate(config.vocab_sizes):
            add(f"embed.cat{j}.table", _uniform(rng, (size, d), d))
            add(f"embed.cat{j}.bias", _uniform(rng, d, d))
        add("cls", rng.normal(0.0, 0.02, size=d))
        for stage, n_layers in (("self", config.n_self_layers), ("cross", config.n_cross_layers)):
            for layer in range(n_layers):
                pre = f"{stage}.{layer}"
                add(f"{pre}.ln1.gain", np.ones(d))
                add(f"{pre}.ln1.bias", np.zeros(d))
                for w in ("wq", "wk", "wv", "wo"):
                    add(f"{pre}.attn.{w}", _uniform(rng, (d, d), d))
                add(f"{pre}.ln2.gain", np.ones(d))
                add(f"{pre}.ln2.bias", np.zeros(d))
                add(f"{pre}.ff.w1", _uniform(rng, (d, f), d))
                add(f"{pre}.ff.b1", np.zeros(f))
                add(f"{pre}.ff.w2", _uniform(rng, (f, d), f))
                add(f"{pre}.ff.b2", np.zeros(d))
        add("head.ln.gain", np.ones(d))
        add("head.ln.bias", np.zeros(d))
        add("head.weight", _uniform(rng, (d, 1), d))
        add("head.bias", np.zeros(1))
        self.params = p

    # ------------------------------------------------------------ bookkeeping

    def parameters(self, prefix: str | None = None) -> list[Parameter]:
        if prefix is None:
            return list(self.params.values())
        return [v for k, v in self.params.items() if k.startswith(prefix)]

    def parameter_count(self) -> int:
        return sum(v.data.size for v in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name not in self.params:
                raise DataError(f"unexpected parameter {name!r}")
            if value.shape != self.params[name].data.shape:
                raise DataError(
                    f"shape mismatch for {name}: got {value.shape}, "
                    f"expected {self.params[name].data.shape}"
                )
        missing = set(self.params) - set(state)
        if missing:
            raise DataError(f"missing parameter {sorted(missing)[0]!r}")
        for name, value in state.items():
            self.params[name].data = np.array(value, dtype=np.float64)

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())

    # ------------------------------------------------------------ building blocks

    def _dropout(self, x: Tensor) -> Tensor:
        rate = self.config.dropout
        if not self.training or rate == 0.0:
            return x
        keep = self._dropout_rng.uniform(size=x.shape) >= rate
        return x * (keep / (1.0 - rate))

    def _block(self, prefix: str, x: Tensor, key_mask: np.ndarray | None = None, first_only: bool = False) -> Tensor:
        """Pre-norm attention + feedforward over tokens on axis -2 of ``x`` (B, T, d)."""
        cfg = self.config
        P = self.params
        B, T, d = x.shape
        H = cfg.n_heads
        hd = d // H
        h = ad.layer_norm(x, P[f"{prefix}.ln1.gain"], P[f"{prefix}.ln1.bias"])
        hq = h[:, :1, :] if first_only else h
        Tq = hq.shape[1]
        q = (hq @ P[f"{prefix}.attn.wq"]).reshape(B, Tq, H, hd).transpose(0, 2, 1, 3)
        k = (h @ P[f"{prefix}.attn.wk"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        v = (h @ P[f"{prefix}.attn.wv"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        logits = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
        if key_mask is not None:
            logits = logits + np.where(key_mask, 0.0, MASK_FILL)[:, None, None, :]
        attn = ad.softmax(logits, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        resid = x[:, :1, :] if first_only else x
        x = resid + self._dropout(ctx @ P[f"{prefix}.attn.wo"])
        h2 = ad.layer_norm(x, P[f"{prefix}.ln2.gain"], P[f"{prefix}.ln2.bias"])
        act = ad.gelu if cfg.activation == "gelu" else ad.relu
        ff = act(h2 @ P[f"{prefix}.ff.w1"] + P[f"{prefix}.ff.b1"]) @ P[f"{prefix}.ff.w2"] + P[f"{prefix}.ff.b2"]
        return x + self._dropout(ff)

    # ------------------------------------------------------------ forward pieces

    def embed(self, x_cont: np.ndarray, x_cat: np.ndarray) -> Tensor:
        """Token matrix (N, k+1, d) with the CLS token in row 0."""
        cfg = self.config
        P = self.params
        x_cont = np.asarray(x_cont, dtype=np.float64)
        x_cat = np.asarray(x_cat, dtype=np.int64)
        n = x_cont.shape[0]
        if x_cont.shape[1] != cfg.n_continuous or x_cat.shape[1] != len(cfg.vocab_sizes):
            raise DataError("feature counts do not match the model configuration")
        vocab = np.asarray(cfg.vocab_sizes, dtype=np.int64)
        if vocab.size and ((x_cat < 0) | (x_cat >= vocab)).any():
            row, col = np.argwhere((x_cat < 0) | (x_cat >= vocab))[0]
            raise DataError(f"categorical feature {col} value {x_cat[row, col]} >= vocabulary {vocab[col]}")
        parts = [P["cls"].reshape(1, 1, cfg.d_k) + np.zeros((n, 1, cfg.d_k))]
        if cfg.n_continuous:
            parts.append(x_cont[:, :, None] * P["embed.num.weight"] + P["embed.num.bias"])
        for j in range(len(cfg.vocab_sizes)):
            row = ad.take_rows(P[f"embed.cat{j}.table"], x_cat[:, j]) + P[f"embed.cat{j}.bias"]
            parts.append(row.reshape(n, 1, cfg.d_k))
        return ad.concat(parts, axis=1)

    def self_encode(self, tokens: Tensor) -> Tensor:
        """CLS rows (N, d) after the self-trader stack."""
        x = tokens
        last = self.config.n_self_layers - 1
        for layer in range(self.config.n_self_layers):
            x = self._block(f"self.{layer}", x, first_only=layer == last)
        return x.reshape(x.shape[0], x.shape[2])

    def encode_traders(self, x_cont: np.ndarray, x_cat: np.ndarray) -> Tensor:
        return self.self_encode(self.embed(x_cont, x_cat))

    def cross_encode(self, cls: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Group-contextualized rows for padded CLS batches (B, n, d)."""
        x = cls
        for layer in range(self.config.n_cross_layers):
            x = self._block(f"cross.{layer}", x, key_mask=mask)
        return x

    def head(self, x: Tensor) -> Tensor:
        P = self.params
        h = ad.layer_norm(x, P["head.ln.gain"], P["head.ln.bias"])
        out = h @ P["head.weight"] + P["head.bias"]
        return out.reshape(out.shape[:-1])

    def score_batch(self, x_cont: np.ndarray, x_cat: np.ndarray, members: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        """Scores (B, n_max) for several groups whose members index rows of the feature arrays.

        Returns the score tensor and the boolean validity mask of the padding.
        """
        if not members or any(len(m) == 0 for m in members):
            raise DataError("cannot score an empty group")
        rows = np.concatenate(members)
        cls = self.encode_traders(x_cont[rows], x_cat[rows])
        n_max = max(len(m) for m in members)
        B = len(members)
        pad = np.full((B, n_max), len(rows), dtype=np.int64)
        mask = np.zeros((B, n_max), dtype=bool)
        start = 0
        for b, m in enumerate(members):
            pad[b, : len(m)] = np.arange(start, start + len(m))
            mask[b, : len(m)] = True
            start += len(m)
        padded = ad.take_rows(ad.concat([cls, np.zeros((1, self.config.d_k))], axis=0), pad.reshape(-1))
        padded = padded.reshape(B, n_max, self.config.d_k)
        return self.head(self.cross_encode(padded, mask)), mask


# ---------------------------------------------------------------- spec-level operations


def embed_features(record: TraderRecord, model: Model) -> Tensor:
    """Token matrix (k+1, d) for one trader."""
    tokens = model.embed(record.continuous_features[None, :], record.categorical_features[None, :])
    return tokens.reshape(tokens.shape[1], tokens.shape[2])


def self_trader_encode(tokens: Tensor, model: Model) -> Tensor:
    """CLS vector (d,) of one trader's token matrix."""
    out = model.self_encode(tokens.reshape(1, *tokens.shape))
    return out.reshape(model.config.d_k)


def cross_trader_encode(cls_vectors: Tensor, model: Model) -> Tensor:
    """Contextualized (n, d) rows for the CLS vectors of one group."""
    cls_vectors = ad.as_tensor(cls_vectors)
    if cls_vectors.shape[0] == 0:
        raise DataError("cannot encode an empty group")
    out = model.cross_encode(cls_vectors.reshape(1, *cls_vectors.shape))
    return out.reshape(cls_vectors.shape)


def score_group(group: RankingGroup, ds: Dataset, model: Model) -> np.ndarray:
    """Inference-mode scores for the members of one group, in member order."""
    was = model.training
    model.training = False
    try:
        with ad.no_grad():
            scores, _ = model.score_batch(ds.x_cont, ds.x_cat, [group.members])
    finally:
        model.training = was
    return scores.data[0].copy()


def score_groups(groups: Sequence[RankingGroup], ds: Dataset, model: Model, batch: int = 64) -> list[np.ndarray]:
    was = model.training
    model.training = False
    out: list[np.ndarray] = []
    try:
        with ad.no_grad():
            for start in range(0, len(groups), batch):
                chunk = groups[start : start + batch]
                scores, _ = model.score_batch(ds.x_cont, ds.x_cat, [g.members for g in chunk])
                out.extend(scores.data[b, : len(g)].copy() for b, g in enumerate(chunk))
    finally:
        model.training = was
    return out


# ---------------------------------------------------------------- checkpoint file

MAGIC = b"PRNK"
FORMAT_VERSION = 1


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Binary layout: magic, u32 version, u32 count, then per parameter
    (u32 name length, name, u32 rank, u64 dims..., little-endian f64 values)."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DataError(f"{path}: truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        state[name] = values.reshape(shape)
    if pos != len(buf):
        raise DataError(f"{path}: trailing bytes after checkpoint")
    return state


def load_checkpoint(path: str | Path, config: ModelConfig) -> Model:
    model = Model(config)
    model.load_state_dict(read_checkpoint(path))
    return model


def config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)
