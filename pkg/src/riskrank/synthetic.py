"""Synthetic trader population standing in for the private exchange data.

Each trader has a latent profile class (normal or risky) that sets the
distribution of its 14 behavioural features: one beta distribution per
feature and class, moment-matched to the published class means and standard
deviations. Features evolve across 20-trade buckets through a Gaussian AR(1)
copula, so each bucket's marginals stay exactly on the class beta.

A hidden skill score is a weighted sum of standardized signal features, led by
ProfitRate20, SharpeRatio20 and WinTradeRate20, plus an upside interaction of
ProfitRate20 with WinTradeRate20. Per-trade returns are drawn
around an increasing function of skill, which plants a monotone link between
the observable features and next_total_pl. Labels are then the top alpha% of
future returns, exactly as for real data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from riskrank.data import Dataset, Schema, TradeLedger, compute_return, top_alpha
from riskrank.errors import ConfigError

# feature: (mean normal, mean risky, std normal, std risky)
FEATURE_MOMENTS: dict[str, tuple[float, float, float, float]] = {
    "AVGPTS3_20": (0.430, 0.588, 0.211, 0.244),
    "AvgOpen20": (0.535, 0.638, 0.220, 0.345),
    "AvgShortSales20": (0.485, 0.419, 0.270, 0.330),
    "DurationRate20": (0.320, 0.355, 0.120, 0.132),
    "DurationRatio20": (0.127, 0.166, 0.067, 0.124),
    "PassAvgReturn": (0.502, 0.540, 0.053, 0.121),
    "ProfitRate20": (0.497, 0.623, 0.243, 0.297),
    "ProfitxDur20": (0.327, 0.422, 0.173, 0.223),
    "SharpeRatio20": (0.443, 0.489, 0.082, 0.127),
    "WinTradeRate20": (0.623, 0.685, 0.204, 0.238),
    "PerFTSE20": (0.249, 0.157, 0.356, 0.279),
    "TradFQ20": (0.363, 0.314, 0.292, 0.285),
    "OrderCloseRate20": (0.182, 0.189, 0.263, 0.286),
    "NumTrades": (0.305, 0.270, 0.326, 0.290),
}
CONTINUOUS = list(FEATURE_MOMENTS)
CATEGORICAL = ["AgeGroup", "MarketCluster", "Segment"]
VOCAB = [5, 10, 3]
DEFAULT_SKILL_WEIGHTS = {
    "ProfitRate20": 0.45,
    "SharpeRatio20": 0.3,
    "WinTradeRate20": 0.3,
    "AVGPTS3_20": 0.2,
    "AvgOpen20": 0.15,
    "PassAvgReturn": 0.15,
}
BUCKET = 20


@dataclass
class Calibration:
    risky_share: float = 0.05  # fraction of traders with the risky feature profile
    feature_persistence: float = 0.995  # AR(1) coefficient of the copula across buckets
    skill_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SKILL_WEIGHTS))
    interaction: float = 0.35  # weight on the ProfitRate20 x WinTradeRate20 upside term
    product_weight: float = 0.0  # weight on a signed product invisible to linear models
    product_pair: tuple[str, str] = ("SharpeRatio20", "AVGPTS3_20")
    base_rate: float = -0.004  # mean per-trade return of an average trader
    skill_rate: float = 0.012
    tail_rate: float = 0.02  # extra convex return above skill 1
    trade_noise: float = 0.03
    stake_median: float = 500.0
    stake_sigma: float = 0.25
    stake_link: float = 0.0  # log-stake slope on the AvgOpen20 copula score (position size)
    market_switch: float = 0.05  # per-bucket chance a trader changes favourite market
    alpha: float = 1.0
    moments: dict[str, tuple[float, float, float, float]] = field(
        default_factory=lambda: dict(FEATURE_MOMENTS)
    )


@dataclass
class SyntheticData:
    dataset: Dataset
    ledger: TradeLedger
    skill: np.ndarray  # hidden skill per record, aligned with dataset rows
    profile: np.ndarray  # latent class per record (1 = risky profile)
    returns: np.ndarray


class _Marginal:
    """Inverse CDF for one feature/class: a moment-matched beta, or a truncated normal."""

    def __init__(self, name: str, mean: float, std: float):
        var = std * std
        if not 0 < mean < 1 or var >= mean * (1 - mean):
            warnings.warn(
                f"{name}: beta cannot reach mean {mean} with std {std}; using a truncated normal",
                stacklevel=3,
            )
            lo, hi = (0 - mean) / std, (1 - mean) / std
            self.dist = stats.truncnorm(lo, hi, loc=mean, scale=std)
        else:
            common = mean * (1 - mean) / var - 1
            self.dist = stats.beta(mean * common, (1 - mean) * common)

    def ppf(self, u: np.ndarray) -> np.ndarray:
        return self.dist.ppf(u)


def beta_params(mean: float, std: float) -> tuple[float, float]:
    """Shape parameters of the beta distribution with the given mean and std."""
    var = std * std
    if var >= mean * (1 - mean):
        raise ConfigError(f"no beta distribution has mean {mean} and std {std}")
    common = mean * (1 - mean) / var - 1
    return mean * common, (1 - mean) * common


def sample_class_features(
    n: int, risky: bool, seed: int = 0, calibration: Calibration | None = None
) -> np.ndarray:
    """Independent draws of the 14 features for one profile class, shape (n, 14)."""
    cal = calibration or Calibration()
    rng = np.random.default_rng(seed)
    out = np.empty((n, len(CONTINUOUS)))
    for j, name in enumerate(CONTINUOUS):
        mn, mr, sn, sr = cal.moments[name]
        marg = _Marginal(name, mr if risky else mn, sr if risky else sn)
        out[:, j] = marg.ppf(rng.uniform(size=n))
    return out


def _population_stats(cal: Calibration) -> dict[str, tuple[float, float]]:
    res = {}
    w = cal.risky_share
    for name in {*cal.skill_weights, *cal.product_pair}:
        mn, mr, sn, sr = cal.moments[name]
        mean = (1 - w) * mn + w * mr
        second = (1 - w) * (sn**2 + mn**2) + w * (sr**2 + mr**2)
        res[name] = (mean, float(np.sqrt(second - mean**2)))
    return res


def hidden_skill(features: np.ndarray, cal: Calibration | None = None) -> np.ndarray:
    """Skill score from the signal features; features in CONTINUOUS column order."""
    cal = cal or Calibration()
    pop = _population_stats(cal)
    z = {}
    for name in pop:
        mean, std = pop[name]
        z[name] = (features[..., CONTINUOUS.index(name)] - mean) / std
    linear = sum(w * z[name] for name, w in cal.skill_weights.items())
    zp = z.get("ProfitRate20", 0.0)
    zw = z.get("WinTradeRate20", 0.0)
    a, b = cal.product_pair
    return linear + cal.interaction * np.maximum(zp, 0) * np.maximum(zw, 0) + cal.product_weight * z[a] * z[b]


def _trade_rate(skill: np.ndarray, cal: Calibration) -> np.ndarray:
    return cal.base_rate + cal.skill_rate * skill + cal.tail_rate * np.maximum(skill - 1.0, 0.0) ** 2


def generate_synthetic(
    n_traders: int = 2000,
    trades_per_trader: int = 200,
    seed: int = 0,
    calibration: Calibration | None = None,
    window: int = 100,
) -> SyntheticData:
    """Draw a ledger and labelled trader-period records.

    Records sit at trade indices j = 20, 40, ... with a full ``window`` of
    future trades; features describe the bucket ending at j.
    """
    if n_traders < 100:
        raise ConfigError("n_traders must be at least 100")
    if trades_per_trader < BUCKET + window + BUCKET:
        raise ConfigError(f"trades_per_trader must be at least {BUCKET + window + BUCKET}")
    cal = calibration or Calibration()
    rng = np.random.default_rng(seed)
    n_buckets = trades_per_trader // BUCKET
    n_feat = len(CONTINUOUS)
    rho = cal.feature_persistence

    profile = (rng.uniform(size=n_traders) < cal.risky_share).astype(np.int64)
    # Gaussian copula state per trader, feature and bucket
    z = np.empty((n_traders, n_buckets, n_feat))
    z[:, 0] = rng.standard_normal((n_traders, n_feat))
    for b in range(1, n_buckets):
        z[:, b] = rho * z[:, b - 1] + np.sqrt(1 - rho * rho) * rng.standard_normal((n_traders, n_feat))
    u = stats.norm.cdf(z)
    feats = np.empty_like(u)
    for j, name in enumerate(CONTINUOUS):
        mn, mr, sn, sr = cal.moments[name]
        normal, risky = _Marginal(name, mn, sn), _Marginal(name, mr, sr)
        is_r = profile == 1
        feats[~is_r, :, j] = normal.ppf(u[~is_r, :, j])
        feats[is_r, :, j] = risky.ppf(u[is_r, :, j])
    skill = hidden_skill(feats, cal)  # (traders, buckets)

    stake = cal.stake_median * np.exp(cal.stake_sigma * rng.standard_normal(n_traders))
    n_trades = n_buckets * BUCKET
    size = np.exp(cal.stake_link * z[:, :, CONTINUOUS.index("AvgOpen20")])
    margin = stake[:, None] * np.repeat(size, BUCKET, axis=1) * rng.uniform(0.8, 1.2, size=(n_traders, n_trades))
    rate = np.repeat(_trade_rate(skill, cal), BUCKET, axis=1)
    rate = rate + cal.trade_noise * rng.standard_normal((n_traders, n_trades))
    pnl = margin * rate
    ledger = TradeLedger(
        pnl={i: pnl[i] for i in range(n_traders)},
        margin={i: margin[i] for i in range(n_traders)},
    )

    age = rng.integers(0, VOCAB[0], size=n_traders)
    market = np.empty((n_traders, n_buckets), dtype=np.int64)
    market[:, 0] = rng.integers(0, VOCAB[1], size=n_traders)
    for b in range(1, n_buckets):
        switch = rng.uniform(size=n_traders) < cal.market_switch
        market[:, b] = np.where(switch, rng.integers(0, VOCAB[1], size=n_traders), market[:, b - 1])

    rows = []
    for t in range(1, n_buckets):
        j = t * BUCKET
        if j + window > n_trades:
            break
        rows.append(t)
    acct, period, xc, xk, p100, p20, ret, sk, prof = [], [], [], [], [], [], [], [], []
    for i in range(n_traders):
        for t in rows:
            j = t * BUCKET
            past = pnl[i, j - BUCKET : j].sum() / margin[i, j - BUCKET : j].sum()
            segment = 0 if past > 0.05 else (1 if past >= 0 else 2)
            acct.append(i)
            period.append(t)
            xc.append(feats[i, t - 1])
            xk.append((age[i], market[i, t - 1], segment))
            p100.append(pnl[i, j : j + window].sum())
            p20.append(pnl[i, j : j + BUCKET].sum())
            ret.append(compute_return(ledger, i, j, window))
            sk.append(skill[i, t - 1])
            prof.append(profile[i])
    acct_a = np.array(acct)
    period_a = np.array(period)
    returns = np.array(ret)
    label = top_alpha(returns, cal.alpha, np.column_stack([acct_a, period_a * BUCKET]))
    schema = Schema(
        continuous=list(CONTINUOUS),
        categorical=list(CATEGORICAL),
        vocab_sizes=list(VOCAB),
        market_column="MarketCluster",
        seed=seed,
    )
    ds = Dataset(schema, acct_a, period_a, np.array(xc), np.array(xk), np.array(p100), np.array(p20), label)
    ds.extra["return"] = returns
    return SyntheticData(ds, ledger, np.array(sk), np.array(prof), returns)
