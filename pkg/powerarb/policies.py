"""Benchmark policies P1-P5 and their P&L replays."""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .environment import (
    DA_MAX_MWH,
    DA_MIN_MWH,
    HYDROGEN_PRICE,
    QUARTER_MAX_MWH,
    QUARTER_MIN_MWH,
    QUARTERS_PER_HOUR,
    ArbitrageEnv,
    BmAction,
    DaAction,
    PriceContext,
    RewardMode,
    Side,
    TranchedOrder,
    equal_weight_ladder,
)
from .errors import PeriodOutOfRange
from .market_data import Level, MarketTable, to_utc

logger = logging.getLogger(__name__)

FIXED_DA_MWH = 150.0
P1_BID_PRICE = -100.0
P1_ASK_PRICE = 100.0


class BenchmarkId(str, Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"
    P4 = "P4"
    P5 = "P5"

    @property
    def description(self) -> str:
        return _DESCRIPTIONS[self]


_DESCRIPTIONS = {
    BenchmarkId.P1: "DA 150 MWh; BM bid -100 / ask +100",
    BenchmarkId.P2: "DA 200 MWh; no BM trading",
    BenchmarkId.P3: "DA 200 MWh if hydrogen beats DA price, else 20 MWh; no BM trading",
    BenchmarkId.P4: "DA from agent (150 MWh standalone); equal-weight ladders",
    BenchmarkId.P5: "P3's DA rule; equal-weight ladders",
}


@dataclass
class PnlSeries:
    """Hourly P&L of one strategy over consecutive hours."""

    label: str
    timestamps: pd.DatetimeIndex
    hourly: np.ndarray

    def __post_init__(self):
        self.timestamps = pd.DatetimeIndex(self.timestamps)
        self.hourly = np.asarray(self.hourly, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.hourly)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.hourly)

    @property
    def total(self) -> float:
        return float(self.hourly.sum())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "timestamp": self.timestamps.strftime("%Y-%m-%dT%H:%M:%SZ"),
                "hourly_pnl": self.hourly,
                "cumulative_pnl": self.cumulative,
            }
        )

    @classmethod
    def from_frame(cls, label: str, frame: pd.DataFrame) -> "PnlSeries":
        return cls(
            label=label,
            timestamps=pd.to_datetime(frame["timestamp"], utc=True),
            hourly=frame["hourly_pnl"].to_numpy(dtype=np.float64),
        )

    @classmethod
    def concatenate(cls, label: str, parts: Sequence["PnlSeries"]) -> "PnlSeries":
        if not parts:
            return cls(label, pd.DatetimeIndex([], tz="UTC"), np.array([]))
        return cls(
            label=label,
            timestamps=pd.DatetimeIndex(np.concatenate([p.timestamps for p in parts])),
            hourly=np.concatenate([p.hourly for p in parts]),
        )


def _da_position(
    benchmark_id: BenchmarkId, ctx: PriceContext, da_agent_hint: Optional[DaAction]
) -> float:
    if benchmark_id is BenchmarkId.P1:
        return FIXED_DA_MWH
    if benchmark_id is BenchmarkId.P2:
        return DA_MAX_MWH
    if benchmark_id is BenchmarkId.P4:
        return da_agent_hint.s_da if da_agent_hint is not None else FIXED_DA_MWH
    return DA_MAX_MWH if ctx.p_h > ctx.p_da else DA_MIN_MWH


def benchmark_action(
    benchmark_id: Union[BenchmarkId, str],
    phase: Level,
    ctx: PriceContext,
    da_agent_hint: Optional[DaAction] = None,
) -> Union[DaAction, BmAction, TranchedOrder, None]:
    """Deterministic action of a benchmark policy.

    Balancing ladders of P4/P5 split the policy's own feasible volume equally
    across all 11 levels of each side. P2 and P3 place no balancing order.
    """
    benchmark_id = BenchmarkId(benchmark_id)
    s_da = float(np.clip(_da_position(benchmark_id, ctx, da_agent_hint), DA_MIN_MWH, DA_MAX_MWH))
    if Level(phase) is Level.DAY_AHEAD:
        return DaAction(s_da)

    if benchmark_id is BenchmarkId.P1:
        return BmAction(P1_BID_PRICE, P1_ASK_PRICE)
    if benchmark_id in (BenchmarkId.P4, BenchmarkId.P5):
        e_da = s_da / QUARTERS_PER_HOUR
        return TranchedOrder(
            bid=equal_weight_ladder(Side.BID, max(0.0, QUARTER_MAX_MWH - e_da)),
            ask=equal_weight_ladder(Side.ASK, max(0.0, e_da - QUARTER_MIN_MWH)),
        )
    return None


def benchmark_env(
    market: MarketTable, hydrogen_price: float = HYDROGEN_PRICE, literal_eq1: bool = False
) -> ArbitrageEnv:
    """Raw-reward environment without observations, as benchmarks need none."""
    return ArbitrageEnv(
        market,
        hydrogen_price=hydrogen_price,
        literal_eq1=literal_eq1,
        reward_mode=RewardMode.RAW,
        ladder=False,
    )


def play_benchmark_hour(
    env: ArbitrageEnv,
    benchmark_id: BenchmarkId,
    hour_index: int,
    da_agent_hint: Optional[DaAction] = None,
    trace: Optional[List[Dict[str, Any]]] = None,
) -> float:
    """Play one full hour with a benchmark policy; returns its hourly P&L."""
    state = env.new_state(hour_index)
    ctx = env.price_context(hour_index, 0)
    env.apply_day_ahead(state, benchmark_action(benchmark_id, Level.DAY_AHEAD, ctx, da_agent_hint))
    step = None
    while not state.done:
        ctx = env.price_context(hour_index, state.quarter)
        order = benchmark_action(benchmark_id, Level.BALANCING, ctx, da_agent_hint)
        step = env.step_balancing(state, order, RewardMode.RAW)
    if trace is not None:
        trace.extend(dict(row, strategy=benchmark_id.value) for row in state.trace)
    return step.hourly_pnl


def check_period(market: MarketTable, period: Optional[Tuple[Any, Any]]) -> Tuple[Any, Any]:
    """Return ``period`` as UTC bounds, raising if the market does not cover it."""
    market_start, market_end = market.period
    if period is None:
        return to_utc(market_start), to_utc(market_end)
    start, end = to_utc(period[0]), to_utc(period[1])
    if start < to_utc(market_start) or end > to_utc(market_end) or start >= end:
        raise PeriodOutOfRange(
            f"Period [{start.isoformat()}, {end.isoformat()}) not covered by market "
            f"[{to_utc(market_start).isoformat()}, {to_utc(market_end).isoformat()})",
            key=start.isoformat(),
        )
    return start, end


def run_benchmark(
    benchmark_id: Union[BenchmarkId, str],
    market: MarketTable,
    period: Optional[Tuple[Any, Any]] = None,
    hydrogen_price: float = HYDROGEN_PRICE,
    literal_eq1: bool = False,
    da_hints: Optional[Dict[int, DaAction]] = None,
    trace: Optional[List[Dict[str, Any]]] = None,
) -> PnlSeries:
    """Replay a benchmark over every complete hour of ``period``.

    ``da_hints`` maps hour index to the agent's DA decision for P4.
    """
    benchmark_id = BenchmarkId(benchmark_id)
    start, end = check_period(market, period)
    env = benchmark_env(market, hydrogen_price, literal_eq1)
    hours = env.hours_between(start, end)
    hints = da_hints or {}
    hourly = [
        play_benchmark_hour(env, benchmark_id, hour, hints.get(hour), trace) for hour in hours
    ]
    series = PnlSeries(
        label=benchmark_id.value,
        timestamps=pd.DatetimeIndex([env.hour_start(h) for h in hours]),
        hourly=np.array(hourly, dtype=np.float64),
    )
    logger.debug(f"{benchmark_id.value}: {len(hours)} hours, total {series.total:.2f} EUR")
    return series


@dataclass(frozen=True)
class HourContext:
    """The interval a learning agent is currently settling."""

    env: ArbitrageEnv
    hour_index: int
    quarter: int
    da_agent_hint: Optional[float] = None


def baseline_quarter_pnls(
    ids: Sequence[Union[BenchmarkId, str]], context: HourContext
) -> List[float]:
    """Quarter P&L of each benchmark on the same interval, by fresh simulation."""
    env = context.env
    hint = DaAction(context.da_agent_hint) if context.da_agent_hint is not None else None
    pnls = []
    for benchmark_id in ids:
        benchmark_id = BenchmarkId(benchmark_id)
        state = env.new_state(context.hour_index)
        ctx = env.price_context(context.hour_index, 0)
        da_action = benchmark_action(benchmark_id, Level.DAY_AHEAD, ctx, hint)
        state.s_da = da_action.s_da
        breakdown = None
        while state.quarter <= context.quarter:
            ctx = env.price_context(context.hour_index, state.quarter)
            order = benchmark_action(benchmark_id, Level.BALANCING, ctx, hint)
            _, breakdown, _ = env.settle_quarter(state, order)
        pnls.append(breakdown.raw_total)
    return pnls
