"""One-hour episodes of the day-ahead / balancing market game.

An episode is one DA step followed by four quarter-hour balancing auctions.
Balancing orders clear paid-as-bid against the interval's clearing prices;
whatever energy is held after each quarter is converted to hydrogen.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ObservationConfig
from .errors import (
    DaStepMissing,
    DoubleDaStep,
    EmptyBaselines,
    EpisodeFinished,
    IncompleteHour,
    InsufficientHistory,
    InfeasiblePostTradePosition,
    OutOfBoundsAction,
    VolumeExceedsFeasibility,
    WrongArity,
)
from .market_data import Level, MarketTable, RegulationState, assemble_observation, window_rows

logger = logging.getLogger(__name__)

DA_MIN_MWH = 20.0
DA_MAX_MWH = 200.0
QUARTERS_PER_HOUR = 4
QUARTER_MIN_MWH = DA_MIN_MWH / QUARTERS_PER_HOUR
QUARTER_MAX_MWH = DA_MAX_MWH / QUARTERS_PER_HOUR
BM_PRICE_LIMIT = 200.0
HYDROGEN_PRICE = 75.0
LADDER_STEP = 20.0
ASK_LEVELS = tuple(75.0 + LADDER_STEP * k for k in range(11))
BID_LEVELS = tuple(-125.0 + LADDER_STEP * k for k in range(11))
VOLUME_TOLERANCE = 1e-9


class Side(str, Enum):
    BID = "bid"
    ASK = "ask"


class RewardMode(str, Enum):
    """Learning-signal variant for the balancing agent."""

    RAW = "raw"
    IMITATION = "imitation"
    TRANCHED = "tranched"
    TRANCHED_IMITATION = "tranched-imitation"

    @property
    def uses_ladder(self) -> bool:
        return self in (RewardMode.TRANCHED, RewardMode.TRANCHED_IMITATION)

    @property
    def baseline_ids(self) -> Tuple[str, ...]:
        if self is RewardMode.IMITATION:
            return ("P1", "P2", "P3")
        if self is RewardMode.TRANCHED_IMITATION:
            return ("P4", "P5")
        return ()


@dataclass(frozen=True)
class DaAction:
    """Day-ahead energy bought for the hour, MWh."""

    s_da: float

    def clipped(self) -> Tuple["DaAction", bool]:
        value = float(np.clip(self.s_da, DA_MIN_MWH, DA_MAX_MWH))
        return DaAction(value), value != self.s_da


@dataclass(frozen=True)
class BmAction:
    """Single-price balancing order: bid price and ask price, EUR/MWh."""

    p_bid: float
    p_ask: float

    def clipped(self) -> Tuple["BmAction", bool]:
        bid = float(np.clip(self.p_bid, -BM_PRICE_LIMIT, BM_PRICE_LIMIT))
        ask = float(np.clip(self.p_ask, -BM_PRICE_LIMIT, BM_PRICE_LIMIT))
        return BmAction(bid, ask), (bid, ask) != (self.p_bid, self.p_ask)


@dataclass(frozen=True)
class LadderOrder:
    """Volumes on the fixed price grid of one side."""

    side: Side
    levels: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        grid = ASK_LEVELS if self.side is Side.ASK else BID_LEVELS
        prices = [price for price, _ in self.levels]
        if any(price not in grid for price in prices):
            raise OutOfBoundsAction(f"{self.side.value} ladder level off the price grid")
        if any(b <= a for a, b in zip(prices, prices[1:])):
            raise OutOfBoundsAction("Ladder level prices must be strictly increasing")
        if any(volume < 0 for _, volume in self.levels):
            raise OutOfBoundsAction("Ladder volumes must be non-negative")

    @property
    def total_volume(self) -> float:
        return float(sum(volume for _, volume in self.levels))


@dataclass(frozen=True)
class TranchedOrder:
    """A bid ladder and an ask ladder submitted together."""

    bid: Optional[LadderOrder] = None
    ask: Optional[LadderOrder] = None


Order = Union[BmAction, LadderOrder, TranchedOrder, None]


def equal_weight_ladder(side: Side, volume: float, levels: Optional[Sequence[float]] = None) -> LadderOrder:
    """Split ``volume`` equally across ``levels`` (default: the whole grid)."""
    grid = ASK_LEVELS if side is Side.ASK else BID_LEVELS
    levels = list(grid if levels is None else levels)
    if not levels:
        return LadderOrder(side, ())
    share = max(0.0, volume) / len(levels)
    return LadderOrder(side, tuple((price, share) for price in levels))


def tranched_from_prices(action: BmAction, bounds: Tuple[float, float]) -> TranchedOrder:
    """Ladders whose reservation prices are the action's bid and ask prices.

    Asks occupy every grid level at or above ``p_ask``; bids every grid level
    at or below ``p_bid``. Each side's feasible volume is split equally.
    """
    max_bid, max_ask = bounds
    ask_levels = [p for p in ASK_LEVELS if p >= action.p_ask]
    bid_levels = [p for p in BID_LEVELS if p <= action.p_bid]
    return TranchedOrder(
        bid=equal_weight_ladder(Side.BID, max_bid, bid_levels),
        ask=equal_weight_ladder(Side.ASK, max_ask, ask_levels),
    )


@dataclass(frozen=True)
class Execution:
    """Fills of one quarter; volumes signed (+ bought via bid, - sold via ask)."""

    fills: Tuple[Tuple[float, float], ...] = ()

    @property
    def s_bm(self) -> float:
        return float(sum(volume for _, volume in self.fills))

    @property
    def cashflow(self) -> float:
        """Sum of volume x own price (paid-as-bid)."""
        return float(sum(volume * price for price, volume in self.fills))

    @property
    def p_bm(self) -> float:
        """Volume-weighted settlement price; NaN when nothing crossed."""
        traded = sum(abs(volume) for _, volume in self.fills)
        if traded == 0:
            return float("nan")
        return float(sum(abs(volume) * price for price, volume in self.fills) / traded)


@dataclass(frozen=True)
class PriceContext:
    """Prices and regulation state of one quarter."""

    p_da: float
    bm_bid_clearing: float
    bm_ask_clearing: float
    regulation_state: RegulationState
    p_h: float = HYDROGEN_PRICE


@dataclass(frozen=True)
class RewardBreakdown:
    """Components of one quarter's reward, EUR."""

    hydrogen_revenue: float
    da_cost: float
    bm_cashflow: float
    shaping_term: float = 0.0

    @property
    def raw_total(self) -> float:
        return self.hydrogen_revenue - self.da_cost - self.bm_cashflow

    @property
    def total(self) -> float:
        return self.raw_total - self.shaping_term

    def with_shaping(self, shaping_term: float) -> "RewardBreakdown":
        return replace(self, shaping_term=float(shaping_term))


@dataclass
class EpisodeState:
    """Mutable state of one hour of play; single owner."""

    hour_index: int
    s_da: Optional[float] = None
    quarter: int = 0
    cumulative_pnl: float = 0.0
    quarter_rewards: List[float] = field(default_factory=list)
    shaped_rewards: List[float] = field(default_factory=list)
    executions: List[Execution] = field(default_factory=list)
    trace: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def da_taken(self) -> bool:
        return self.s_da is not None

    @property
    def done(self) -> bool:
        return self.quarter >= QUARTERS_PER_HOUR

    @property
    def e_da(self) -> float:
        if self.s_da is None:
            raise DaStepMissing("Day-ahead step not taken yet")
        return self.s_da / QUARTERS_PER_HOUR


@dataclass
class BalancingStep:
    """Outcome of one balancing step."""

    reward: float
    breakdown: RewardBreakdown
    execution: Execution
    next_observation: Optional[np.ndarray]
    done: bool
    hourly_pnl: Optional[float] = None


def feasible_volume_bounds(state: EpisodeState) -> Tuple[float, float]:
    """(max bid volume, max ask volume) keeping the quarter within [5, 50] MWh."""
    e_da = state.e_da
    return max(0.0, QUARTER_MAX_MWH - e_da), max(0.0, e_da - QUARTER_MIN_MWH)


def _check_ladder(ladder: Optional[LadderOrder], side: Side, volume: float) -> None:
    if ladder is None:
        return
    if ladder.side is not side:
        raise OutOfBoundsAction(f"Expected a {side.value} ladder, got {ladder.side.value}")
    if ladder.total_volume > volume + VOLUME_TOLERANCE:
        raise VolumeExceedsFeasibility(
            f"{side.value} ladder volume {ladder.total_volume:.6f} exceeds "
            f"feasible {volume:.6f} MWh",
            key=side.value,
        )


def _ladder_fills(ladder: Optional[LadderOrder], ctx: PriceContext) -> Tuple[Tuple[float, float], ...]:
    if ladder is None:
        return ()
    if ladder.side is Side.BID:
        return tuple(
            (price, volume)
            for price, volume in ladder.levels
            if volume > 0 and price >= ctx.bm_bid_clearing
        )
    return tuple(
        (price, -volume)
        for price, volume in ladder.levels
        if volume > 0 and price <= ctx.bm_ask_clearing
    )


def clear_orders(order: Order, volumes: Tuple[float, float], ctx: PriceContext) -> Execution:
    """Paid-as-bid clearing of one quarter.

    ``volumes`` is the feasible (bid, ask) volume. Single-price orders commit
    all of it or nothing; ladder levels fill individually and completely.
    Surplus considers only bids, Shortage only asks, Balanced nothing.
    """
    bid_volume, ask_volume = volumes
    if bid_volume < 0 or ask_volume < 0:
        raise VolumeExceedsFeasibility("Feasible volumes must be non-negative")

    if isinstance(order, LadderOrder):
        order = TranchedOrder(bid=order) if order.side is Side.BID else TranchedOrder(ask=order)

    if isinstance(order, TranchedOrder):
        _check_ladder(order.bid, Side.BID, bid_volume)
        _check_ladder(order.ask, Side.ASK, ask_volume)
        if ctx.regulation_state is RegulationState.SURPLUS:
            return Execution(_ladder_fills(order.bid, ctx))
        if ctx.regulation_state is RegulationState.SHORTAGE:
            return Execution(_ladder_fills(order.ask, ctx))
        return Execution()

    if isinstance(order, BmAction):
        if (
            ctx.regulation_state is RegulationState.SURPLUS
            and bid_volume > 0
            and order.p_bid >= ctx.bm_bid_clearing
        ):
            return Execution(((order.p_bid, bid_volume),))
        if (
            ctx.regulation_state is RegulationState.SHORTAGE
            and ask_volume > 0
            and order.p_ask <= ctx.bm_ask_clearing
        ):
            return Execution(((order.p_ask, -ask_volume),))
    return Execution()


def quarter_reward(
    execution: Execution, state: EpisodeState, ctx: PriceContext, literal_eq1: bool = False
) -> RewardBreakdown:
    """Quarter P&L: hydrogen on the post-trade position less DA cost and BM cash."""
    e_da = state.e_da
    post_trade = e_da + execution.s_bm
    if not (
        QUARTER_MIN_MWH - VOLUME_TOLERANCE <= post_trade <= QUARTER_MAX_MWH + VOLUME_TOLERANCE
    ):
        raise InfeasiblePostTradePosition(
            f"Post-trade quarter energy {post_trade:.6f} MWh outside "
            f"[{QUARTER_MIN_MWH}, {QUARTER_MAX_MWH}]"
        )
    da_energy = state.s_da if literal_eq1 else e_da
    return RewardBreakdown(
        hydrogen_revenue=(execution.s_bm + da_energy) * ctx.p_h,
        da_cost=da_energy * ctx.p_da,
        bm_cashflow=execution.cashflow,
    )


def hourly_reward(quarter_rewards: Sequence[float]) -> float:
    """The DA agent's reward: the sum of the four quarter rewards."""
    if len(quarter_rewards) != QUARTERS_PER_HOUR:
        raise WrongArity(f"Expected {QUARTERS_PER_HOUR} quarter rewards, got {len(quarter_rewards)}")
    return float(sum(quarter_rewards))


def shape_reward(raw: float, baselines: Sequence[float]) -> float:
    """Imitation shaping: raw reward less the mean baseline P&L."""
    if not len(baselines):
        raise EmptyBaselines("Shaping needs at least one baseline")
    return float(raw - sum(baselines) / len(baselines))


class ArbitrageEnv:
    """Episode machinery over a shared, immutable market table.

    ``market`` supplies prices and regulation states; ``observation_table``
    (defaults to ``market``) supplies the possibly standardized observation
    features. Observation settings are only needed when observing.
    """

    def __init__(
        self,
        market: MarketTable,
        observation: Optional[ObservationConfig] = None,
        observation_table: Optional[MarketTable] = None,
        hydrogen_price: float = HYDROGEN_PRICE,
        literal_eq1: bool = False,
        reward_mode: RewardMode = RewardMode.RAW,
        ladder: bool = False,
    ):
        self.market = market
        self.observation = observation
        self.observation_table = observation_table or market
        self.hydrogen_price = hydrogen_price
        self.literal_eq1 = literal_eq1
        self.reward_mode = RewardMode(reward_mode)
        self.ladder = ladder or self.reward_mode.uses_ladder

        timestamps = market.timestamps
        minute_zero = np.flatnonzero(np.asarray(timestamps.minute) == 0)
        if market.resolution.steps_per_hour != QUARTERS_PER_HOUR:
            raise IncompleteHour("Episodes need a quarter-hour market table")
        self._first_row = int(minute_zero[0]) if minute_zero.size else len(market)
        self.n_hours = max(0, (len(market) - self._first_row) // QUARTERS_PER_HOUR)
        self._da_price = market.column("da_price")
        self._bid_clearing = market.column("bm_bid_clearing")
        self._ask_clearing = market.column("bm_ask_clearing")
        self._regulation = market.column("regulation_code")

    # Hours

    def hour_row(self, hour_index: int) -> int:
        row = self._first_row + QUARTERS_PER_HOUR * hour_index
        if hour_index < 0 or row + QUARTERS_PER_HOUR > len(self.market):
            raise IncompleteHour(
                f"Hour {hour_index} lacks {QUARTERS_PER_HOUR} quarter records",
                key=str(hour_index),
            )
        return row

    def hour_start(self, hour_index: int):
        return self.market.timestamp_at(self.hour_row(hour_index))

    def hour_index_of(self, timestamp) -> int:
        position = self.market.position_of(timestamp)
        return (position - self._first_row) // QUARTERS_PER_HOUR

    def hours_between(self, start, end) -> List[int]:
        """Complete hours whose start lies in [start, end)."""
        timestamps = self.market.timestamps
        rows = np.arange(self._first_row, self._first_row + QUARTERS_PER_HOUR * self.n_hours, QUARTERS_PER_HOUR)
        starts = timestamps[rows] if len(rows) else timestamps[:0]
        selected = (starts >= start) & (starts < end)
        return [int(h) for h in np.flatnonzero(selected)]

    def price_context(self, hour_index: int, quarter: int) -> PriceContext:
        row = self.hour_row(hour_index) + quarter
        return PriceContext(
            p_da=float(self._da_price[row]),
            bm_bid_clearing=float(self._bid_clearing[row]),
            bm_ask_clearing=float(self._ask_clearing[row]),
            regulation_state=RegulationState.from_code(self._regulation[row]),
            p_h=self.hydrogen_price,
        )

    # Observations

    def require_observation(self) -> ObservationConfig:
        if self.observation is None:
            raise DaStepMissing("Environment was built without observation settings")
        return self.observation

    def observable(self, hour_index: int) -> bool:
        """Whether the hour's observation windows fit inside the observation table."""
        config = self.require_observation()
        if not 0 <= hour_index < self.n_hours:
            return False
        try:
            row = self.observation_table.position_of(self.hour_start(hour_index))
        except InsufficientHistory:
            return False
        needed = window_rows(Level.DAY_AHEAD, config.lookback_days, self.observation_table.resolution)
        return row >= needed

    def observable_hours(self, hours: Sequence[int]) -> List[int]:
        return [h for h in hours if self.observable(h)]

    def da_observation(self, hour_index: int) -> np.ndarray:
        config = self.require_observation()
        return assemble_observation(
            self.observation_table,
            self.hour_start(hour_index),
            Level.DAY_AHEAD,
            config.lookback_days,
            config.da_features,
        )

    def bm_observation(self, state: EpisodeState) -> np.ndarray:
        config = self.require_observation()
        row = self.hour_row(state.hour_index) + state.quarter
        features = assemble_observation(
            self.observation_table,
            self.market.timestamp_at(row),
            Level.BALANCING,
            config.lookback_days,
            config.bm_features,
        )
        decision = np.array([state.s_da / DA_MAX_MWH, self._da_price[row] / 100.0])
        return np.concatenate([features, decision])

    # Episode

    def new_state(self, hour_index: int) -> EpisodeState:
        self.hour_row(hour_index)
        return EpisodeState(hour_index=hour_index)

    def reset_episode(self, hour_index: int) -> Tuple[EpisodeState, np.ndarray]:
        """Fresh state at quarter 0 and the DA observation at the hour boundary."""
        state = self.new_state(hour_index)
        return state, self.da_observation(hour_index)

    def apply_day_ahead(self, state: EpisodeState, action: DaAction) -> None:
        if state.da_taken:
            raise DoubleDaStep(f"Day-ahead step already taken for hour {state.hour_index}")
        bounded, was_clipped = action.clipped()
        if was_clipped:
            logger.warning(
                f"DA action {action.s_da:.3f} MWh clipped to {bounded.s_da:.1f} "
                f"(hour {state.hour_index})"
            )
        state.s_da = bounded.s_da
        state.trace.append(
            {
                "hour": state.hour_index,
                "timestamp": self.hour_start(state.hour_index).isoformat(),
                "step": "da",
                "s_da": state.s_da,
                "clipped": was_clipped,
            }
        )

    def step_day_ahead(self, state: EpisodeState, action: DaAction) -> np.ndarray:
        """Record the DA position and return the first BM observation."""
        self.apply_day_ahead(state, action)
        return self.bm_observation(state)

    def _as_order(self, state: EpisodeState, action: Order) -> Order:
        if isinstance(action, BmAction):
            bounded, was_clipped = action.clipped()
            if was_clipped:
                logger.warning(
                    f"BM prices ({action.p_bid:.2f}, {action.p_ask:.2f}) clipped to "
                    f"({bounded.p_bid:.2f}, {bounded.p_ask:.2f})"
                )
            if self.ladder:
                return tranched_from_prices(bounded, feasible_volume_bounds(state))
            return bounded
        return action

    def settle_quarter(
        self, state: EpisodeState, order: Order
    ) -> Tuple[Execution, RewardBreakdown, PriceContext]:
        """Clear and value the current quarter without shaping; advances the quarter."""
        if not state.da_taken:
            raise DaStepMissing("Balancing step before the day-ahead step")
        if state.done:
            raise EpisodeFinished(f"Hour {state.hour_index} already settled")
        ctx = self.price_context(state.hour_index, state.quarter)
        execution = clear_orders(order, feasible_volume_bounds(state), ctx)
        breakdown = quarter_reward(execution, state, ctx, self.literal_eq1)
        state.executions.append(execution)
        state.quarter_rewards.append(breakdown.raw_total)
        state.cumulative_pnl += breakdown.raw_total
        state.quarter += 1
        return execution, breakdown, ctx

    def step_balancing(
        self,
        state: EpisodeState,
        action: Order,
        reward_mode: Optional[RewardMode] = None,
    ) -> BalancingStep:
        """Clear one quarter, compute the learning reward and advance.

        The cumulative P&L always accrues the unshaped reward.
        """
        mode = RewardMode(reward_mode) if reward_mode is not None else self.reward_mode
        quarter = state.quarter
        order = self._as_order(state, action)
        execution, breakdown, ctx = self.settle_quarter(state, order)

        if mode.baseline_ids:
            from .policies import HourContext, baseline_quarter_pnls

            baselines = baseline_quarter_pnls(
                mode.baseline_ids,
                HourContext(self, state.hour_index, quarter, da_agent_hint=state.s_da),
            )
            shaped = shape_reward(breakdown.raw_total, baselines)
            breakdown = breakdown.with_shaping(breakdown.raw_total - shaped)
        state.shaped_rewards.append(breakdown.total)
        state.trace.append(_trace_row(self, state, quarter, action, execution, breakdown, ctx))

        if state.done:
            return BalancingStep(
                reward=breakdown.total,
                breakdown=breakdown,
                execution=execution,
                next_observation=None,
                done=True,
                hourly_pnl=hourly_reward(state.quarter_rewards),
            )
        next_observation = self.bm_observation(state) if self.observation else None
        return BalancingStep(breakdown.total, breakdown, execution, next_observation, False)


def _describe_order(order: Order) -> Dict[str, Any]:
    if isinstance(order, BmAction):
        return {"p_bid": order.p_bid, "p_ask": order.p_ask}
    if isinstance(order, (LadderOrder, TranchedOrder)):
        return {"order": "ladder"}
    return {}


def _trace_row(env, state, quarter, action, execution, breakdown, ctx) -> Dict[str, Any]:
    return {
        "hour": state.hour_index,
        "timestamp": env.market.timestamp_at(env.hour_row(state.hour_index) + quarter).isoformat(),
        "step": f"q{quarter}",
        "s_da": state.s_da,
        **_describe_order(action),
        "regulation_state": ctx.regulation_state.value,
        "fills": ";".join(f"{volume:+.6g}@{price:g}" for price, volume in execution.fills),
        "s_bm": execution.s_bm,
        "hydrogen_revenue": breakdown.hydrogen_revenue,
        "da_cost": breakdown.da_cost,
        "bm_cashflow": breakdown.bm_cashflow,
        "shaping_term": breakdown.shaping_term,
        "reward": breakdown.total,
        "pnl": breakdown.raw_total,
    }
