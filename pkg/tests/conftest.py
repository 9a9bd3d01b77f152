"""Pytest fixtures and configuration for power arbitrage tests."""

from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pytest
import yaml

from powerarb.config import RunConfig, SynthConfig
from powerarb.market_data import MARKET_SCHEMA, MarketTable, Resolution
from powerarb.synthetic import generate_synthetic_market
from powerarb.environment import ArbitrageEnv
from powerarb.walkforward import FittedArtifacts, build_environment, fit_on_window, prepare_feature_table

TRAIN_PERIOD = (pd.Timestamp("2015-01-02", tz="UTC"), pd.Timestamp("2015-01-06", tz="UTC"))
TEST_PERIOD = (pd.Timestamp("2015-01-06", tz="UTC"), pd.Timestamp("2015-01-08", tz="UTC"))

SMALL_RUN = {
    "seed": 7,
    "observation": {"lookback_days": 1},
    "predictor": {"iterations": 200},
    "agent": {
        "episodes": 20,
        "hidden_sizes": [8],
        "batch_size": 8,
        "replay_capacity": 256,
        "curve_window": 5,
    },
}

Values = Union[float, str, Sequence]


def _per_row(value: Values, n: int) -> list:
    if isinstance(value, (str, float, int)):
        return [value] * n
    if len(value) != n:
        raise ValueError(f"Expected {n} values, got {len(value)}")
    return list(value)


def build_market(
    hours: int = 2,
    da_price: Values = 60.0,
    regulation_state: Values = "balanced",
    bm_bid_clearing: Values = -500.0,
    bm_ask_clearing: Values = 500.0,
    start: str = "2015-01-01",
    rows: Optional[int] = None,
) -> MarketTable:
    """Hand-built quarter-hour table; scalars apply to every row, sequences per row."""
    n = rows if rows is not None else hours * 4
    return MarketTable(
        pd.DataFrame(
            {
                "timestamp": pd.date_range(start, periods=n, freq="15min", tz="UTC"),
                "da_price": _per_row(da_price, n),
                "bm_bid_clearing": _per_row(bm_bid_clearing, n),
                "bm_ask_clearing": _per_row(bm_ask_clearing, n),
                "regulation_state": _per_row(regulation_state, n),
            }
        ),
        Resolution.QUARTER_HOURLY,
    )


def schema_frame(periods: int, freq: str = "15min", start: str = "2015-01-01") -> pd.DataFrame:
    """Frame with every loader column, ready to be written as CSV."""
    frame = pd.DataFrame(
        {"timestamp": pd.date_range(start, periods=periods, freq=freq, tz="UTC").strftime("%Y-%m-%dT%H:%M:%SZ")}
    )
    for column in MARKET_SCHEMA[1:]:
        frame[column] = 1.0
    frame["da_price"] = 50.0 + np.arange(periods, dtype=np.float64)
    frame["bm_bid_clearing"] = -10.0
    frame["bm_ask_clearing"] = 10.0
    frame["regulation_state"] = "surplus"
    return frame


@pytest.fixture
def make_market() -> Callable[..., MarketTable]:
    """Factory for hand-built quarter-hour market tables."""
    return build_market


@pytest.fixture
def make_schema_frame() -> Callable[..., pd.DataFrame]:
    return schema_frame


@pytest.fixture(scope="session")
def small_config() -> RunConfig:
    """Run configuration sized for tests: one-day look-back, tiny networks."""
    return RunConfig.model_validate(SMALL_RUN)


@pytest.fixture(scope="session")
def synthetic_market() -> MarketTable:
    """Eight synthetic days starting 2015-01-01."""
    return generate_synthetic_market(SynthConfig(days=8, seed=3))


@pytest.fixture(scope="session")
def feature_table(synthetic_market, small_config) -> MarketTable:
    return prepare_feature_table(synthetic_market, small_config)


@pytest.fixture(scope="session")
def fitted(feature_table, small_config) -> FittedArtifacts:
    """Predictor, scaler and agents fitted on the training window."""
    return fit_on_window(feature_table, TRAIN_PERIOD, small_config, seed=7)


@pytest.fixture(scope="session")
def evaluation_env(feature_table, small_config, fitted) -> ArbitrageEnv:
    """Environment over the whole feature table, standardized with the fitted scaler."""
    env, _ = build_environment(feature_table, small_config, fitted.predictor, fitted.scaler)
    return env


@pytest.fixture(scope="session")
def train_period() -> Tuple[pd.Timestamp, pd.Timestamp]:
    return TRAIN_PERIOD


@pytest.fixture(scope="session")
def test_period() -> Tuple[pd.Timestamp, pd.Timestamp]:
    return TEST_PERIOD


@pytest.fixture
def run_dir(tmp_path) -> Path:
    """Temporary artifact directory."""
    return tmp_path / "run"


@pytest.fixture
def config_file(tmp_path) -> Path:
    """YAML config file with the test-sized settings."""
    path = tmp_path / "powerarb.yaml"
    settings = {key: value for key, value in SMALL_RUN.items() if key != "seed"}
    path.write_text(yaml.safe_dump(settings), encoding="utf-8")
    return path
