"""Tests for benchmark policies P1-P5 and their replays."""

import numpy as np
import pytest

from powerarb.environment import ASK_LEVELS, BID_LEVELS, BmAction, DaAction, PriceContext, TranchedOrder
from powerarb.errors import PeriodOutOfRange
from powerarb.market_data import Level, RegulationState
from powerarb.policies import (
    BenchmarkId,
    HourContext,
    PnlSeries,
    baseline_quarter_pnls,
    benchmark_action,
    benchmark_env,
    run_benchmark,
)


def ctx(p_da: float) -> PriceContext:
    return PriceContext(p_da=p_da, bm_bid_clearing=0.0, bm_ask_clearing=0.0, regulation_state=RegulationState.BALANCED)


class TestBenchmarkAction:
    """Deterministic decisions per policy and phase."""

    def test_p3_buys_minimum_when_hydrogen_is_cheaper(self):
        assert benchmark_action(BenchmarkId.P3, Level.DAY_AHEAD, ctx(80.0)) == DaAction(20.0)

    def test_p3_buys_maximum_when_hydrogen_is_dearer(self):
        assert benchmark_action(BenchmarkId.P3, Level.DAY_AHEAD, ctx(60.0)) == DaAction(200.0)

    def test_p1(self):
        assert benchmark_action("P1", Level.DAY_AHEAD, ctx(60.0)) == DaAction(150.0)
        assert benchmark_action("P1", Level.BALANCING, ctx(60.0)) == BmAction(-100.0, 100.0)

    def test_p2_places_no_balancing_order(self):
        assert benchmark_action(BenchmarkId.P2, Level.DAY_AHEAD, ctx(90.0)) == DaAction(200.0)
        assert benchmark_action(BenchmarkId.P2, Level.BALANCING, ctx(90.0)) is None

    def test_p4_ladders_follow_agent_position(self):
        order = benchmark_action(BenchmarkId.P4, Level.BALANCING, ctx(60.0), DaAction(100.0))

        assert isinstance(order, TranchedOrder)
        assert [price for price, _ in order.ask.levels] == list(ASK_LEVELS)
        assert [price for price, _ in order.bid.levels] == list(BID_LEVELS)
        assert {volume for _, volume in order.ask.levels} == {20.0 / 11}
        assert order.bid.total_volume == pytest.approx(25.0)

    def test_p4_without_hint_uses_fixed_position(self):
        assert benchmark_action(BenchmarkId.P4, Level.DAY_AHEAD, ctx(60.0)) == DaAction(150.0)

    def test_p5_combines_p3_position_with_ladders(self):
        order = benchmark_action(BenchmarkId.P5, Level.BALANCING, ctx(80.0))

        # 20 MWh leaves nothing to sell
        assert order.ask.total_volume == 0.0
        assert order.bid.total_volume == pytest.approx(45.0)


class TestRunBenchmark:
    """Hourly P&L replays over a market period."""

    def test_p2_at_hydrogen_price_breaks_even(self, make_market):
        series = run_benchmark(BenchmarkId.P2, make_market(hours=5, da_price=75.0))

        assert len(series) == 5
        assert series.total == 0.0

    def test_p2_on_constant_price(self, make_market):
        series = run_benchmark(BenchmarkId.P2, make_market(hours=3, da_price=50.0))

        assert series.total == 200 * 25 * 3
        assert list(series.cumulative) == [5000.0, 10000.0, 15000.0]

    def test_p4_uses_agent_hints(self, make_market):
        market = make_market(hours=2, da_price=50.0)

        hinted = run_benchmark(BenchmarkId.P4, market, da_hints={0: DaAction(20.0)})
        standalone = run_benchmark(BenchmarkId.P4, market)

        assert hinted.hourly[0] == 20 * 25
        assert standalone.hourly[0] == 150 * 25
        assert hinted.hourly[1] == standalone.hourly[1]

    def test_p3_never_below_p2(self, synthetic_market):
        p2 = run_benchmark(BenchmarkId.P2, synthetic_market)
        p3 = run_benchmark(BenchmarkId.P3, synthetic_market)

        assert len(p3) == 8 * 24
        assert np.all(p3.hourly >= p2.hourly - 1e-9)

    def test_deterministic(self, synthetic_market):
        first = run_benchmark(BenchmarkId.P5, synthetic_market)
        second = run_benchmark(BenchmarkId.P5, synthetic_market)

        assert first.hourly.tobytes() == second.hourly.tobytes()
        assert first.timestamps.equals(second.timestamps)

    def test_period_selects_whole_hours(self, make_market):
        series = run_benchmark(
            BenchmarkId.P2, make_market(hours=4), period=("2015-01-01T01:00:00Z", "2015-01-01T03:00:00Z")
        )

        assert len(series) == 2
        assert str(series.timestamps[0]) == "2015-01-01 01:00:00+00:00"

    def test_period_outside_market(self, make_market):
        with pytest.raises(PeriodOutOfRange):
            run_benchmark(BenchmarkId.P1, make_market(hours=2), period=("2014-12-31", "2015-01-01T01:00:00Z"))

    def test_trace_rows_name_the_strategy(self, make_market):
        trace = []

        run_benchmark(BenchmarkId.P1, make_market(hours=1), trace=trace)

        assert [row["step"] for row in trace] == ["da", "q0", "q1", "q2", "q3"]
        assert {row["strategy"] for row in trace} == {"P1"}


class TestBaselineQuarterPnls:
    """Benchmark quarter P&L on the interval an agent is settling."""

    def test_p2_at_hydrogen_price(self, make_market):
        env = benchmark_env(make_market(hours=1, da_price=75.0))

        assert baseline_quarter_pnls([BenchmarkId.P2], HourContext(env, 0, 0)) == [0.0]

    def test_conversion_margins_in_balanced_quarter(self, make_market):
        env = benchmark_env(make_market(hours=1, da_price=60.0))

        pnls = baseline_quarter_pnls(["P1", "P2", "P3"], HourContext(env, 0, 2))

        assert pnls == [37.5 * 15, 50 * 15, 50 * 15]


class TestPnlSeries:
    def test_frame_round_trip_keeps_values(self, make_market):
        series = run_benchmark(BenchmarkId.P3, make_market(hours=3, da_price=[60.0] * 4 + [80.0] * 8))

        restored = PnlSeries.from_frame("P3", series.to_frame())

        np.testing.assert_array_equal(restored.hourly, series.hourly)
        assert restored.timestamps.equals(series.timestamps)
        assert list(series.hourly) == [750.0 * 4, 20 * -5.0, 20 * -5.0]

    def test_concatenate(self):
        empty = PnlSeries.concatenate("agent", [])

        assert len(empty) == 0
        assert empty.total == 0.0
