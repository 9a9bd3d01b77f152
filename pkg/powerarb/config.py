"""Run configuration: validated defaults, YAML file loading and CLI overrides."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import InvalidConfig

logger = logging.getLogger(__name__)

RewardModeName = Literal["raw", "imitation", "tranched", "tranched-imitation"]

FORECAST_FEATURES = [
    "load_forecast_mw",
    "wind_forecast_mw",
    "solar_forecast_mw",
    "ntc_forecast_mw",
]
# Realized values, published only after their interval.
ACTUAL_FEATURES = [
    "cross_border_flow_mw",
    "actual_load_mw",
    "actual_ntc_mw",
    "gen_biomass_mw",
    "gen_gas_mw",
    "gen_nuclear_mw",
    "gen_solar_mw",
    "gen_waste_mw",
    "gen_wind_offshore_mw",
    "gen_wind_onshore_mw",
    "residual_load_mw",
]
DAY_LAG = 96
HOUR_LAG = 4

DEFAULT_DA_FEATURES = [
    *FORECAST_FEATURES,
    f"da_price_lag{DAY_LAG}",
    *(f"{name}_lag{DAY_LAG}" for name in ACTUAL_FEATURES),
]
DEFAULT_BM_FEATURES = [
    *FORECAST_FEATURES,
    *(f"{name}_lag{HOUR_LAG}" for name in ACTUAL_FEATURES),
    f"bm_bid_clearing_lag{DAY_LAG}",
    f"bm_ask_clearing_lag{DAY_LAG}",
    f"regulation_code_lag{DAY_LAG}",
]
DEFAULT_LAGS = [
    ("da_price", DAY_LAG),
    ("bm_bid_clearing", DAY_LAG),
    ("bm_ask_clearing", DAY_LAG),
    ("regulation_code", DAY_LAG),
    *((name, DAY_LAG) for name in ACTUAL_FEATURES),
    *((name, HOUR_LAG) for name in ACTUAL_FEATURES),
]
DEFAULT_PREDICTOR_FEATURES = [
    *(f"{name}_lag{DAY_LAG}" for name in ACTUAL_FEATURES if name != "cross_border_flow_mw"),
    *FORECAST_FEATURES,
    "da_price",
    "is_weekend",
]


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PriceRegime(_StrictModel):
    """One component of the day-ahead price mixture."""

    weight: float = Field(default=1.0, description="Relative mixture weight")
    da_mean: float = Field(default=60.0, description="Mean DA price, EUR/MWh")
    da_std: float = Field(default=15.0, description="DA price stddev, EUR/MWh")


class SynthConfig(_StrictModel):
    """Synthetic market generator settings."""

    days: int = Field(default=1096, description="Number of days to generate (2015-2017)")
    seed: int = Field(default=7, description="Generator seed")
    start: str = Field(default="2015-01-01", description="First day (UTC)")
    shortage_base_prob: float = Field(
        default=0.4, description="Stationary probability of a Shortage interval"
    )
    balanced_prob: float = Field(
        default=0.1, description="Stationary probability of a Balanced interval"
    )
    persistence: float = Field(
        default=0.6, description="Probability that a quarter repeats the last state"
    )
    signal_strength: float = Field(
        default=0.6,
        description="Forecast shift (in stddevs) between Shortage and Surplus",
    )
    price_regimes: List[PriceRegime] = Field(
        default_factory=lambda: [
            PriceRegime(weight=0.6, da_mean=45.0, da_std=12.0),
            PriceRegime(weight=0.4, da_mean=85.0, da_std=20.0),
        ],
        description="Daily DA price regime mixture",
    )
    surplus_bid_mean: float = Field(default=-20.0, description="Surplus bid clearing")
    surplus_bid_std: float = Field(default=60.0, description="Surplus bid stddev")
    shortage_ask_mean: float = Field(default=160.0, description="Shortage ask clearing")
    shortage_ask_std: float = Field(default=60.0, description="Shortage ask stddev")
    bm_spread_mean: float = Field(default=30.0, description="Mean bid/ask spread")


class EnvConfig(_StrictModel):
    """Episode and reward settings."""

    hydrogen_price: float = Field(default=75.0, description="Hydrogen value, EUR/MWh")
    reward_mode: RewardModeName = Field(default="raw", description="Reward variant")
    ladder: bool = Field(default=False, description="Tranche BM orders over ladders")
    literal_eq1: bool = Field(
        default=False, description="Deduct the full DA cost in every quarter"
    )


class ObservationConfig(_StrictModel):
    """Feature sets and look-back for agent observations."""

    lookback_days: int = Field(default=3, description="Look-back window, days")
    da_features: List[str] = Field(default_factory=lambda: list(DEFAULT_DA_FEATURES))
    bm_features: List[str] = Field(default_factory=lambda: list(DEFAULT_BM_FEATURES))
    lags: List[Tuple[str, int]] = Field(
        default_factory=lambda: list(DEFAULT_LAGS),
        description="(feature, lag steps) pairs in table resolution",
    )


class PredictorConfig(_StrictModel):
    """Logistic shortage/surplus predictor settings."""

    features: List[str] = Field(
        default_factory=lambda: list(DEFAULT_PREDICTOR_FEATURES)
    )
    learning_rate: float = Field(default=0.5, description="Gradient descent step")
    iterations: int = Field(default=10_000, description="Iteration cap")
    l2: float = Field(default=1e-4, description="L2 penalty")
    threshold: float = Field(default=0.5, description="Shortage call threshold")


class AgentConfig(_StrictModel):
    """DDPG hyperparameters for both agents."""

    episodes: int = Field(default=50_000, description="Training episodes")
    hidden_sizes: List[int] = Field(default_factory=lambda: [64, 32])
    actor_lr: float = Field(default=0.00025, description="Actor learning rate")
    critic_lr: float = Field(default=0.0025, description="Critic learning rate")
    tau: float = Field(default=0.005, description="Soft target update rate")
    gamma: float = Field(default=1.0, description="Discount within an episode")
    replay_capacity: int = Field(default=100_000, description="Replay ring size")
    replay_precision: Literal["float64", "float32"] = Field(
        default="float64", description="Stored observation dtype; float32 halves replay memory"
    )
    batch_size: int = Field(default=64, description="Minibatch size")
    noise_start: float = Field(default=0.2, description="Initial raw-space noise")
    noise_end: float = Field(default=0.02, description="Final raw-space noise")
    noise_decay_fraction: float = Field(
        default=0.6, description="Share of episodes over which noise decays"
    )
    reward_scale: float = Field(
        default=1e-3, description="Multiplier on the learning signal only"
    )
    curve_window: int = Field(default=100, description="Moving-average window")


class ExplicitPair(_StrictModel):
    """A non-contiguous (train, test) experiment."""

    train_years: List[int]
    test_year: int


class PlanConfig(_StrictModel):
    """Walk-forward plan parameters."""

    years: Optional[List[int]] = Field(
        default=None, description="Years to plan over (default: all in data)"
    )
    train_len: int = Field(default=2, description="Training years per fold")
    test_len: int = Field(default=1, description="Test years per fold")
    explicit_pairs: List[ExplicitPair] = Field(default_factory=list)
    workers: int = Field(default=1, description="Folds run in parallel")


class PathsConfig(_StrictModel):
    """Input and output locations."""

    data: str = Field(default=".generated/market.csv", description="Market CSV")
    output_dir: str = Field(default=".generated/run", description="Artifact dir")


class RunConfig(_StrictModel):
    """Complete configuration of a run."""

    seed: int = Field(default=7, description="Master seed for agents and sampling")
    paths: PathsConfig = Field(default_factory=PathsConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    env: EnvConfig = Field(default_factory=EnvConfig)
    observation: ObservationConfig = Field(default_factory=ObservationConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    plan: PlanConfig = Field(default_factory=PlanConfig)

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON form."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def flat_items(self) -> List[Tuple[str, Any]]:
        """Dotted key/value pairs, sorted, for manifests."""
        return sorted(_flatten(self.model_dump(mode="json")))


def _flatten(data: Dict[str, Any], prefix: str = "") -> List[Tuple[str, Any]]:
    items = []
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(_flatten(value, dotted + "."))
        else:
            items.append((dotted, value))
    return items


def _set_dotted(data: Dict[str, Any], dotted_key: str, value: Any) -> None:
    parts = dotted_key.split(".")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise InvalidConfig(f"'{part}' is not a section", key=dotted_key)
        node = child
    node[parts[-1]] = value


def load_run_config(
    path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Build a RunConfig from defaults, an optional YAML file and dotted overrides.

    Unknown keys anywhere are rejected with InvalidConfig naming the key.
    """
    data: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise InvalidConfig(f"Config file {path} not found", key=str(path))
        with open(config_path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise InvalidConfig("Config file must hold a mapping", key=str(path))
        data = loaded
        logger.info(f"Config loaded from {config_path}")

    for dotted_key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, dotted_key, value)

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"])
        raise InvalidConfig(f"{key}: {first['msg']}", key=key) from e
