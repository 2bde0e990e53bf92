import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from riskrank.data import Dataset, Schema

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_dataset(n=40, n_pos=None, seed=0, markets=2, periods=2, n_cont=3):
    """Small random dataset; the top ``n_pos`` next_total_pl rows are labelled 1."""
    rng = np.random.default_rng(seed)
    schema = Schema(
        continuous=[f"c{i}" for i in range(n_cont)],
        categorical=["market", "kind"],
        vocab_sizes=[markets, 3],
        market_column="market",
    )
    profit = rng.normal(0, 100, n)
    label = np.zeros(n, dtype=np.int64)
    label[np.argsort(-profit)[: n_pos if n_pos is not None else max(1, n // 10)]] = 1
    return Dataset(
        schema,
        account_id=np.arange(n),
        period=rng.integers(0, periods, n),
        x_cont=rng.uniform(size=(n, n_cont)),
        x_cat=np.column_stack([rng.integers(0, markets, n), rng.integers(0, 3, n)]),
        next_total_pl=profit,
        next_profit_20=profit / 5,
        label=label,
    )


@pytest.fixture
def small_dataset():
    return make_dataset()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
