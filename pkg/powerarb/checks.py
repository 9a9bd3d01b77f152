"""Invariant suites run by ``--check``: accounting, clearing, feasibility, shaping, P3 vs P2."""

import logging
import operator
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import SynthConfig
from .environment import (
    ASK_LEVELS,
    BID_LEVELS,
    BM_PRICE_LIMIT,
    DA_MAX_MWH,
    DA_MIN_MWH,
    HYDROGEN_PRICE,
    QUARTER_MAX_MWH,
    QUARTER_MIN_MWH,
    QUARTERS_PER_HOUR,
    VOLUME_TOLERANCE,
    BmAction,
    DaAction,
    EpisodeState,
    LadderOrder,
    PriceContext,
    RewardMode,
    Side,
    TranchedOrder,
    clear_orders,
    feasible_volume_bounds,
    hourly_reward,
    quarter_reward,
)
from .errors import InfeasiblePostTradePosition, InvariantViolation
from .market_data import MarketTable, RegulationState
from .policies import BenchmarkId, HourContext, baseline_quarter_pnls, benchmark_env, run_benchmark
from .synthetic import generate_synthetic_market

logger = logging.getLogger(__name__)

IDENTITY_TOLERANCE = 1e-9
_STATES = list(RegulationState)


@dataclass
class CheckResult:
    name: str
    passed: bool
    cases: int
    detail: str = ""


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= IDENTITY_TOLERANCE * max(1.0, abs(a), abs(b))


def _random_context(rng: np.random.Generator, p_da: Optional[float] = None) -> PriceContext:
    return PriceContext(
        p_da=float(rng.uniform(-50, 250)) if p_da is None else p_da,
        bm_bid_clearing=float(rng.uniform(-250, 250)),
        bm_ask_clearing=float(rng.uniform(-250, 250)),
        regulation_state=_STATES[int(rng.integers(len(_STATES)))],
    )


def _random_ladder(rng: np.random.Generator, side: Side, volume: float) -> LadderOrder:
    grid = ASK_LEVELS if side is Side.ASK else BID_LEVELS
    active = sorted(p for p in grid if rng.random() < 0.5)
    if not active:
        return LadderOrder(side, ())
    weights = rng.random(len(active))
    shares = volume * rng.uniform(0, 1) * weights / weights.sum()
    return LadderOrder(side, tuple(zip(active, (float(s) for s in shares))))


def _random_bm_action(rng: np.random.Generator) -> BmAction:
    # Out-of-range prices included on purpose; clipping must cope.
    return BmAction(float(rng.uniform(-400, 400)), float(rng.uniform(-400, 400))).clipped()[0]


def check_accounting_identity(rng: np.random.Generator, episodes: int = 1000) -> CheckResult:
    """Hourly reward equals the quarter sum; with no fills it is s_da * (p_h - p_da)."""
    for episode in range(episodes):
        state = EpisodeState(hour_index=0, s_da=float(rng.uniform(DA_MIN_MWH, DA_MAX_MWH)))
        p_da = float(rng.uniform(-50, 250))
        rewards, fills = [], 0
        for _ in range(QUARTERS_PER_HOUR):
            ctx = _random_context(rng, p_da)
            execution = clear_orders(_random_bm_action(rng), feasible_volume_bounds(state), ctx)
            rewards.append(quarter_reward(execution, state, ctx).raw_total)
            fills += len(execution.fills)
            state.quarter += 1
        total = hourly_reward(rewards)
        if not _close(total, sum(rewards)):
            return CheckResult("accounting_identity", False, episode + 1, f"hour sum {total} != {sum(rewards)}")
        if fills == 0 and not _close(total, state.s_da * (HYDROGEN_PRICE - p_da)):
            return CheckResult(
                "accounting_identity", False, episode + 1, f"no-fill P&L {total} != s_da*(p_h-p_da)"
            )
    return CheckResult("accounting_identity", True, episodes)


# (ladder side, regulation state) -> price test against that side's clearing
# price and the sign of the filled volume. Unlisted pairs never trade.
FILL_TABLE: Dict[Tuple[Side, RegulationState], Tuple[Callable[[float, float], bool], str, float]] = {
    (Side.BID, RegulationState.SURPLUS): (operator.ge, "bm_bid_clearing", 1.0),
    (Side.ASK, RegulationState.SHORTAGE): (operator.le, "bm_ask_clearing", -1.0),
}


def brute_force_fills(order: TranchedOrder, ctx: PriceContext) -> List[Tuple[float, float]]:
    """Enumerate every ladder level against ``FILL_TABLE``."""
    fills: List[Tuple[float, float]] = []
    for ladder in (order.bid, order.ask):
        if ladder is None:
            continue
        rule = FILL_TABLE.get((ladder.side, ctx.regulation_state))
        if rule is None:
            continue
        crosses, clearing_field, sign = rule
        clearing = getattr(ctx, clearing_field)
        fills.extend(
            (price, sign * volume)
            for price, volume in ladder.levels
            if volume > 0 and crosses(price, clearing)
        )
    return fills


def check_clearing_oracle(rng: np.random.Generator, cases: int = 10_000) -> CheckResult:
    """Ladder clearing agrees exactly with per-level enumeration."""
    for case in range(cases):
        state = EpisodeState(hour_index=0, s_da=float(rng.uniform(DA_MIN_MWH, DA_MAX_MWH)))
        max_bid, max_ask = feasible_volume_bounds(state)
        order = TranchedOrder(
            bid=_random_ladder(rng, Side.BID, max_bid),
            ask=_random_ladder(rng, Side.ASK, max_ask),
        )
        ctx = _random_context(rng)
        execution = clear_orders(order, (max_bid, max_ask), ctx)
        expected = brute_force_fills(order, ctx)
        if list(execution.fills) != expected:
            return CheckResult("clearing_oracle", False, case + 1, f"fills {execution.fills} != {expected}")
        cashflow = sum(volume * price for price, volume in expected)
        if execution.cashflow != cashflow:
            return CheckResult("clearing_oracle", False, case + 1, f"cashflow {execution.cashflow} != {cashflow}")
    return CheckResult("clearing_oracle", True, cases)


def check_feasibility_fuzz(rng: np.random.Generator, sequences: int = 10_000) -> CheckResult:
    """Adversarial orders never push a quarter outside [5, 50] MWh."""
    for sequence in range(sequences):
        s_da = DaAction(float(rng.uniform(-100, 400))).clipped()[0].s_da
        state = EpisodeState(hour_index=0, s_da=s_da)
        for _ in range(QUARTERS_PER_HOUR):
            ctx = _random_context(rng)
            bounds = feasible_volume_bounds(state)
            if rng.random() < 0.5:
                order = _random_bm_action(rng)
            else:
                order = TranchedOrder(
                    bid=_random_ladder(rng, Side.BID, bounds[0]),
                    ask=_random_ladder(rng, Side.ASK, bounds[1]),
                )
            execution = clear_orders(order, bounds, ctx)
            try:
                quarter_reward(execution, state, ctx)
            except InfeasiblePostTradePosition as e:
                return CheckResult("feasibility_fuzz", False, sequence + 1, e.message)
            post_trade = state.e_da + execution.s_bm
            if not QUARTER_MIN_MWH - VOLUME_TOLERANCE <= post_trade <= QUARTER_MAX_MWH + VOLUME_TOLERANCE:
                return CheckResult("feasibility_fuzz", False, sequence + 1, f"post-trade {post_trade}")
            state.quarter += 1
    return CheckResult("feasibility_fuzz", True, sequences)


def check_shaping_neutrality(
    market: MarketTable, rng: np.random.Generator, hours: int = 24
) -> CheckResult:
    """Shaped rewards equal raw less the mean live baseline; reported P&L ignores the mode."""
    env = benchmark_env(market)
    played = min(hours, env.n_hours)
    for hour in range(played):
        s_da = float(rng.uniform(DA_MIN_MWH, DA_MAX_MWH))
        actions = [
            BmAction(float(rng.uniform(-BM_PRICE_LIMIT, BM_PRICE_LIMIT)), float(rng.uniform(-BM_PRICE_LIMIT, BM_PRICE_LIMIT)))
            for _ in range(QUARTERS_PER_HOUR)
        ]
        pnls = {}
        for mode in RewardMode:
            state = env.new_state(hour)
            env.apply_day_ahead(state, DaAction(s_da))
            for quarter, action in enumerate(actions):
                step = env.step_balancing(state, action, mode)
                if mode.baseline_ids:
                    baselines = baseline_quarter_pnls(
                        mode.baseline_ids, HourContext(env, hour, quarter, da_agent_hint=s_da)
                    )
                    expected = step.breakdown.raw_total - sum(baselines) / len(baselines)
                    if not _close(step.reward, expected):
                        return CheckResult(
                            "shaping_neutrality", False, hour + 1,
                            f"{mode.value} reward {step.reward} != {expected}",
                        )
            pnls[mode] = state.cumulative_pnl
        if len(set(pnls.values())) != 1:
            return CheckResult("shaping_neutrality", False, hour + 1, f"P&L differs across modes: {pnls}")
    return CheckResult("shaping_neutrality", True, played)


def check_p3_dominates_p2(market: MarketTable) -> CheckResult:
    """P3 earns at least P2 on every hour."""
    p2 = run_benchmark(BenchmarkId.P2, market)
    p3 = run_benchmark(BenchmarkId.P3, market)
    worse = np.flatnonzero(p3.hourly < p2.hourly - IDENTITY_TOLERANCE * np.maximum(1.0, np.abs(p2.hourly)))
    if worse.size:
        first = worse[0]
        return CheckResult(
            "p3_dominates_p2", False, len(p2),
            f"hour {p2.timestamps[first].isoformat()}: P3 {p3.hourly[first]} < P2 {p2.hourly[first]}",
        )
    return CheckResult("p3_dominates_p2", True, len(p2))


def run_invariant_suites(
    market: Optional[MarketTable] = None,
    seed: int = 7,
    scale: float = 0.1,
) -> List[CheckResult]:
    """Every suite at ``scale`` times its full size; a small synthetic market when none is given."""
    if market is None:
        market = generate_synthetic_market(SynthConfig(days=2, seed=seed))
    rng = np.random.default_rng(seed)

    def sized(full: int) -> int:
        return max(1, int(full * scale))

    suites: Sequence[Callable[[], CheckResult]] = [
        lambda: check_accounting_identity(rng, sized(1000)),
        lambda: check_clearing_oracle(rng, sized(10_000)),
        lambda: check_feasibility_fuzz(rng, sized(100_000)),
        lambda: check_shaping_neutrality(market, rng, sized(240)),
        lambda: check_p3_dominates_p2(market),
    ]
    results = []
    for suite in suites:
        result = suite()
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"check {result.name}: {'ok' if result.passed else 'FAILED'} ({result.cases} cases) {result.detail}")
        results.append(result)
    return results


def require_invariants(results: Sequence[CheckResult]) -> None:
    failed = [r for r in results if not r.passed]
    if failed:
        raise InvariantViolation(
            "; ".join(f"{r.name}: {r.detail}" for r in failed), key=failed[0].name
        )
