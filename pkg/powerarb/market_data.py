"""Market tables: loading, validation, lagging and observation windows."""

import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import (
    GapInTimestamps,
    InsufficientHistory,
    InvalidConfig,
    InvalidMarketRecord,
    LagExceedsHistory,
    MissingColumn,
    NonFiniteValue,
    UnorderedTimestamps,
)

logger = logging.getLogger(__name__)


class Resolution(str, Enum):
    """Sampling step of a market table."""

    HOURLY = "hourly"
    QUARTER_HOURLY = "quarter_hourly"

    @property
    def step(self) -> timedelta:
        return timedelta(hours=1) if self is Resolution.HOURLY else timedelta(minutes=15)

    @property
    def steps_per_hour(self) -> int:
        return 1 if self is Resolution.HOURLY else 4

    @property
    def steps_per_day(self) -> int:
        return 24 * self.steps_per_hour


class RegulationState(str, Enum):
    """Imbalance direction of the grid in one interval."""

    SURPLUS = "surplus"
    SHORTAGE = "shortage"
    BALANCED = "balanced"

    @property
    def code(self) -> int:
        return {"surplus": -1, "shortage": 1, "balanced": 0}[self.value]

    @classmethod
    def from_code(cls, code: float) -> "RegulationState":
        if code > 0:
            return cls.SHORTAGE
        if code < 0:
            return cls.SURPLUS
        return cls.BALANCED


class Level(str, Enum):
    """Market level an observation is assembled for."""

    DAY_AHEAD = "day_ahead"
    BALANCING = "balancing"


PRICE_COLUMNS = ["da_price", "bm_bid_clearing", "bm_ask_clearing"]
FUNDAMENTAL_COLUMNS = [
    "load_forecast_mw",
    "wind_forecast_mw",
    "solar_forecast_mw",
    "ntc_forecast_mw",
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
MARKET_SCHEMA = ["timestamp"] + PRICE_COLUMNS + ["regulation_state"] + FUNDAMENTAL_COLUMNS
DERIVED_COLUMNS = ["regulation_code", "is_weekend"]


@dataclass(frozen=True)
class MarketRecord:
    """One interval of market data."""

    timestamp: datetime
    da_price: float
    bm_bid_clearing: float
    bm_ask_clearing: float
    regulation_state: RegulationState
    fundamentals: Dict[str, float] = field(default_factory=dict)


class MarketTable:
    """Immutable, gap-free, timestamp-indexed market data.

    Backed by a pandas frame that is copied on construction and never handed
    out by reference. Numeric columns are additionally cached as a float
    matrix for fast window slicing.
    """

    def __init__(self, frame: pd.DataFrame, resolution: Resolution):
        self.resolution = Resolution(resolution)
        self._frame = _validate_frame(frame.copy(), self.resolution)
        numeric = [c for c in self._frame.columns if c != "regulation_state"]
        self._numeric_columns = numeric
        self._column_index = {name: i for i, name in enumerate(numeric)}
        self._matrix = self._frame[numeric].to_numpy(dtype=np.float64, copy=True)
        self._matrix.setflags(write=False)
        self._positions = {ts: i for i, ts in enumerate(self._frame.index)}

    def __len__(self) -> int:
        return len(self._frame)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MarketTable):
            return NotImplemented
        return self.resolution == other.resolution and self._frame.equals(
            other._frame
        )

    @property
    def columns(self) -> List[str]:
        return list(self._frame.columns)

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        return self._frame.index.copy()

    @property
    def period(self) -> Tuple[datetime, datetime]:
        """Half-open [start, end) covered by the table."""
        index = self._frame.index
        return index[0].to_pydatetime(), (index[-1] + self.resolution.step).to_pydatetime()

    @property
    def rows(self) -> Iterator[MarketRecord]:
        fundamentals = [c for c in FUNDAMENTAL_COLUMNS if c in self._frame.columns]
        for ts, row in self._frame.iterrows():
            yield MarketRecord(
                timestamp=ts.to_pydatetime(),
                da_price=float(row.get("da_price", np.nan)),
                bm_bid_clearing=float(row.get("bm_bid_clearing", np.nan)),
                bm_ask_clearing=float(row.get("bm_ask_clearing", np.nan)),
                regulation_state=RegulationState(
                    row.get("regulation_state", RegulationState.BALANCED.value)
                ),
                fundamentals={name: float(row[name]) for name in fundamentals},
            )

    def to_frame(self) -> pd.DataFrame:
        return self._frame.copy()

    def has_column(self, name: str) -> bool:
        return name in self._column_index

    def column(self, name: str) -> np.ndarray:
        """Read-only view of a numeric column."""
        if name not in self._column_index:
            raise MissingColumn(f"Column '{name}' not in table", key=name)
        return self._matrix[:, self._column_index[name]]

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        missing = [n for n in names if n not in self._column_index]
        if missing:
            raise MissingColumn(f"Column '{missing[0]}' not in table", key=missing[0])
        return self._matrix[:, [self._column_index[n] for n in names]]

    def regulation_states(self) -> List[RegulationState]:
        return [RegulationState(s) for s in self._frame["regulation_state"]]

    def position_of(self, timestamp) -> int:
        ts = pd.Timestamp(timestamp)
        if ts.tzinfo is None:
            ts = ts.tz_localize("UTC")
        try:
            return self._positions[ts]
        except KeyError:
            raise InsufficientHistory(
                f"Timestamp {ts.isoformat()} not covered by table", key=ts.isoformat()
            ) from None

    def timestamp_at(self, position: int) -> pd.Timestamp:
        return self._frame.index[position]

    def years(self) -> List[int]:
        return sorted(set(int(y) for y in self._frame.index.year))

    def slice_period(self, start, end) -> "MarketTable":
        """Rows with start <= timestamp < end."""
        start_ts = to_utc(start)
        end_ts = to_utc(end)
        frame = self._frame[(self._frame.index >= start_ts) & (self._frame.index < end_ts)]
        return MarketTable(frame.reset_index(), self.resolution)

    def with_columns(self, columns: Dict[str, np.ndarray]) -> "MarketTable":
        """New table with the given columns added or replaced."""
        frame = self._frame.copy()
        for name, values in columns.items():
            frame[name] = np.asarray(values, dtype=np.float64)
        return MarketTable(frame.reset_index(), self.resolution)

    def without_columns(self, names: Iterable[str]) -> "MarketTable":
        """New table without the given columns; absent names are ignored."""
        frame = self._frame.drop(columns=list(names), errors="ignore")
        return MarketTable(frame.reset_index(), self.resolution)


def to_utc(value) -> pd.Timestamp:
    ts = pd.Timestamp(value)
    return ts.tz_localize("UTC") if ts.tzinfo is None else ts.tz_convert("UTC")


def _validate_frame(frame: pd.DataFrame, resolution: Resolution) -> pd.DataFrame:
    if "timestamp" in frame.columns:
        frame["timestamp"] = pd.to_datetime(frame["timestamp"], utc=True)
        frame = frame.set_index("timestamp")
    elif not isinstance(frame.index, pd.DatetimeIndex):
        raise MissingColumn("Column 'timestamp' not in table", key="timestamp")
    frame.index = pd.DatetimeIndex(frame.index, name="timestamp")
    if frame.index.tz is None:
        frame.index = frame.index.tz_localize("UTC")
    else:
        frame.index = frame.index.tz_convert("UTC")

    _check_timestamps(frame.index, resolution)

    if "regulation_state" in frame.columns:
        states = frame["regulation_state"].astype(str).str.strip().str.lower()
        unknown = set(states) - {s.value for s in RegulationState}
        if unknown:
            raise InvalidMarketRecord(
                f"Unknown regulation state '{sorted(unknown)[0]}'",
                key="regulation_state",
            )
        frame["regulation_state"] = states
        frame["regulation_code"] = states.map(
            {s.value: float(s.code) for s in RegulationState}
        )
    frame["is_weekend"] = (frame.index.dayofweek >= 5).astype(np.float64)

    for column in frame.columns:
        if column == "regulation_state":
            continue
        # Text that fails to parse becomes NaN and is reported at its own row.
        values = pd.to_numeric(frame[column], errors="coerce").to_numpy(dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise NonFiniteValue(int(bad[0]), column)
        frame[column] = values

    if "bm_bid_clearing" in frame.columns and "bm_ask_clearing" in frame.columns:
        crossed = np.flatnonzero(
            frame["bm_bid_clearing"].to_numpy() > frame["bm_ask_clearing"].to_numpy()
        )
        if crossed.size:
            raise InvalidMarketRecord(
                f"bm_bid_clearing exceeds bm_ask_clearing at row {int(crossed[0])}",
                key="bm_bid_clearing",
            )
    return frame


def _check_timestamps(index: pd.DatetimeIndex, resolution: Resolution) -> None:
    if len(index) < 2:
        return
    step = pd.Timedelta(resolution.step)
    diffs = np.diff(index.asi8)
    irregular = np.flatnonzero(diffs != step.value)
    if not irregular.size:
        return
    i = int(irregular[0])
    diff = int(diffs[i])
    if diff <= 0 or diff % step.value != 0:
        raise UnorderedTimestamps(
            f"Timestamps not strictly increasing by {step} at "
            f"{index[i + 1].isoformat()}",
            key=index[i + 1].isoformat(),
        )
    raise GapInTimestamps((index[i] + step).to_pydatetime())


def load_market_table(
    path: str,
    schema: Optional[Sequence[str]] = None,
    resolution: Resolution = Resolution.QUARTER_HOURLY,
    forward_fill_to_quarter: bool = False,
) -> MarketTable:
    """Load and validate a comma-delimited market file.

    With ``forward_fill_to_quarter`` an hourly file is expanded onto
    quarter-hour resolution by repeating every hourly row four times.
    """
    schema = list(schema) if schema is not None else list(MARKET_SCHEMA)
    file_path = Path(path)
    frame = pd.read_csv(file_path)
    for column in schema:
        if column not in frame.columns:
            raise MissingColumn(
                f"Column '{column}' missing from {file_path}", key=column
            )
    frame = frame[schema] if "timestamp" in schema else frame

    table = MarketTable(frame, resolution)
    if forward_fill_to_quarter:
        if table.resolution is not Resolution.HOURLY:
            raise InvalidConfig(
                "Forward fill applies to hourly files only", key="resolution"
            )
        table = expand_to_quarter_hours(table)
    logger.info(f"Market table loaded from {file_path} ({len(table)} rows)")
    return table


def expand_to_quarter_hours(table: MarketTable) -> MarketTable:
    """Repeat every hourly row for its four quarters."""
    frame = table.to_frame().drop(columns=DERIVED_COLUMNS, errors="ignore")
    repeated = frame.loc[frame.index.repeat(4)].copy()
    offsets = np.tile(np.arange(4) * 15, len(frame))
    repeated.index = repeated.index + pd.to_timedelta(offsets, unit="min")
    return MarketTable(repeated.reset_index(), Resolution.QUARTER_HOURLY)


def save_market_table(table: MarketTable, path: str) -> None:
    """Write the table in the loader's input format."""
    frame = table.to_frame().drop(columns=DERIVED_COLUMNS, errors="ignore")
    frame.index = frame.index.strftime("%Y-%m-%dT%H:%M:%SZ")
    frame.reset_index().to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Market table written to {path}")


@dataclass(frozen=True)
class LagSpec:
    """(feature, lag steps) pairs, lags in the table's own resolution."""

    entries: Tuple[Tuple[str, int], ...]

    def __post_init__(self):
        seen = set()
        for name, lag in self.entries:
            if int(lag) != lag or lag < 0:
                raise InvalidConfig(f"Lag for '{name}' must be a non-negative integer", key=name)
            if (name, lag) in seen:
                raise InvalidConfig(f"Duplicate lag ({name}, {lag})", key=name)
            seen.add((name, lag))

    @classmethod
    def of(cls, entries: Sequence[Tuple[str, int]]) -> "LagSpec":
        return cls(tuple((str(name), int(lag)) for name, lag in entries))

    @property
    def max_lag(self) -> int:
        return max((lag for _, lag in self.entries), default=0)


def lag_column_name(name: str, lag: int) -> str:
    return f"{name}_lag{lag}"


def build_lagged_features(table: MarketTable, spec: LagSpec) -> MarketTable:
    """Append lagged copies of features and drop the first max-lag rows."""
    if spec.max_lag >= len(table):
        raise LagExceedsHistory(
            f"Lag {spec.max_lag} needs more than {len(table)} rows", key=str(spec.max_lag)
        )
    frame = table.to_frame()
    for name, lag in spec.entries:
        if name not in frame.columns:
            raise MissingColumn(f"Column '{name}' not in table", key=name)
        frame[lag_column_name(name, lag)] = frame[name].shift(lag)
    frame = frame.iloc[spec.max_lag :]
    return MarketTable(frame.reset_index(), table.resolution)


def window_steps(level: Level, lookback_days: int, resolution: Resolution) -> int:
    """Hourly window steps; both levels look back in whole hours."""
    return max(1, int(lookback_days) * 24)


def observation_dimension(
    n_features: int, level: Level, lookback_days: int, resolution: Resolution
) -> int:
    return n_features * window_steps(level, lookback_days, resolution)


def window_rows(level: Level, lookback_days: int, resolution: Resolution) -> int:
    """Table rows a window reaches back from ``t``, excluding ``t`` itself."""
    return resolution.steps_per_hour * (window_steps(level, lookback_days, resolution) - 1)


def assemble_observation(
    table: MarketTable,
    t,
    level: Level,
    lookback_days: int,
    features: Sequence[str],
) -> np.ndarray:
    """Flattened (time-major) feature window ending at ``t`` inclusive.

    Steps are one hour apart, so on a quarter-hour table a Balancing window
    ending at minute 15 samples minute 15 of every earlier hour.
    """
    level = Level(level)
    position = table.position_of(t)
    stride = table.resolution.steps_per_hour
    steps = window_steps(level, lookback_days, table.resolution)
    first = position - window_rows(level, lookback_days, table.resolution)
    if first < 0:
        raise InsufficientHistory(
            f"{level.value} window of {steps} steps needs history before "
            f"{table.timestamp_at(0).isoformat()}",
            key=str(t),
        )
    window = table.matrix(features)[first : position + 1 : stride]
    return np.array(window, dtype=np.float64).ravel()


class FeatureScaler:
    """Z-score statistics fitted on a training table only."""

    def __init__(self, means: Dict[str, float], stds: Dict[str, float]):
        self.means = dict(means)
        self.stds = dict(stds)

    @classmethod
    def fit(cls, table: MarketTable, columns: Sequence[str]) -> "FeatureScaler":
        means, stds = {}, {}
        for name in columns:
            values = table.column(name)
            means[name] = float(values.mean())
            std = float(values.std())
            stds[name] = std if std > 0 else 1.0
        return cls(means, stds)

    def transform(self, table: MarketTable) -> MarketTable:
        scaled = {
            name: (table.column(name) - self.means[name]) / self.stds[name]
            for name in self.means
            if table.has_column(name)
        }
        return table.with_columns(scaled)

    def to_key_value_text(self) -> str:
        lines = []
        for name in sorted(self.means):
            lines.append(f"{name}.mean = {self.means[name]:.17g}")
            lines.append(f"{name}.std = {self.stds[name]:.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_key_value_text(cls, text: str) -> "FeatureScaler":
        means, stds = {}, {}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, _, value = line.partition("=")
            name, _, stat = key.strip().rpartition(".")
            if stat == "mean":
                means[name] = float(value)
            elif stat == "std":
                stds[name] = float(value)
            else:
                raise InvalidConfig(f"Unknown scaler key '{key.strip()}'", key=key.strip())
        if set(means) != set(stds):
            missing = sorted(set(means) ^ set(stds))[0]
            raise InvalidConfig(f"Scaler lacks mean or std for '{missing}'", key=missing)
        return cls(means, stds)
