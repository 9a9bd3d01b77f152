"""Tests for fold planning, leakage-free fitting and aggregation."""

import numpy as np
import pandas as pd
import pytest

from powerarb.config import ExplicitPair, PriceRegime, RunConfig, SynthConfig
from powerarb.ddpg import EvaluationResult, TrainingCurve, evaluate_dual_agents, train_dual_agents
from powerarb.environment import ArbitrageEnv, BmAction, DaAction
from powerarb.errors import CoverageGap, InsufficientYears, InvalidConfig
from powerarb.market_data import DERIVED_COLUMNS, FeatureScaler
from powerarb.policies import BenchmarkId, PnlSeries
from powerarb.synthetic import generate_synthetic_market
from powerarb.walkforward import (
    Fold,
    FoldReport,
    accuracy_frame,
    aggregate_reports,
    build_environment,
    build_plan,
    fit_on_window,
    fold_accuracy,
    manifest_items,
    observation_features,
    prepare_feature_table,
    run_fold,
    run_walk_forward,
)

SMALL_WEEK = ("2015-01-02", "2015-01-06", "2015-01-06", "2015-01-08")


def short_fold(index: int = 0) -> Fold:
    """Four training days, two test days of the session synthetic market."""
    return Fold("short", *SMALL_WEEK, index=index)


def fake_report(fold: Fold, agent_hourly, benchmark_hourly: float = 1.0, accuracy: float = 0.6):
    """FoldReport with hand-set hourly P&L; benchmarks earn a flat amount per hour."""
    timestamps = pd.date_range(fold.test_start, periods=len(agent_hourly), freq="h")

    def series(label, values):
        return PnlSeries(label, timestamps, np.asarray(values, dtype=np.float64))

    agent = series("agent", agent_hourly)
    return FoldReport(
        fold=fold,
        agent=agent,
        benchmarks={b.value: series(b.value, [benchmark_hourly] * len(agent_hourly)) for b in BenchmarkId},
        predictor_accuracy=accuracy,
        fingerprint="f" * 64,
        seed=7 + fold.index,
        checksums={},
        observation_dims={"da": 120, "bm": 98},
        curve=TrainingCurve(),
        evaluation=EvaluationResult(agent, {}, [], []),
    )


class TestBuildPlan:
    """Year folds with contiguous training windows."""

    def test_three_years_give_one_fold(self):
        plan = build_plan([2015, 2016, 2017])

        assert [f.fold_id for f in plan.folds] == ["2015-2016_to_2017"]
        fold = plan.folds[0]
        assert fold.train_period == (pd.Timestamp("2015-01-01", tz="UTC"), pd.Timestamp("2017-01-01", tz="UTC"))
        assert fold.test_period == (pd.Timestamp("2017-01-01", tz="UTC"), pd.Timestamp("2018-01-01", tz="UTC"))

    def test_six_years_give_four_sliding_folds(self):
        plan = build_plan(range(2015, 2021))

        assert [f.fold_id for f in plan.folds] == [
            "2015-2016_to_2017",
            "2016-2017_to_2018",
            "2017-2018_to_2019",
            "2018-2019_to_2020",
        ]
        assert [f.index for f in plan.folds] == [0, 1, 2, 3]

    def test_too_few_years(self):
        with pytest.raises(InsufficientYears):
            build_plan([2015, 2016])

    def test_non_contiguous_years(self):
        with pytest.raises(InsufficientYears):
            build_plan([2015, 2016, 2018])

    def test_explicit_pair_runs_beside_sliding_folds(self):
        plan = build_plan(range(2015, 2021), explicit_pairs=[ExplicitPair(train_years=[2017], test_year=2020)])

        (pair,) = plan.explicit_pairs
        assert pair.fold_id == "2017_to_2020"
        assert pair.explicit and pair.index == 4
        assert len(plan.all_folds) == 5

    def test_overlapping_fold_rejected(self):
        with pytest.raises(InvalidConfig):
            Fold("bad", "2015-01-01", "2016-06-01", "2016-01-01", "2017-01-01")

    def test_empty_period_rejected(self):
        with pytest.raises(InvalidConfig):
            Fold("empty", "2015-01-01", "2015-01-01", "2016-01-01", "2017-01-01")


class TestAggregateReports:
    """Concatenation of sliding fold results in test order."""

    def test_totals_are_sums_of_fold_totals(self):
        first = fake_report(Fold.from_years([2015, 2016], 2017, 0), [1.0, 2.0])
        second = fake_report(Fold.from_years([2016, 2017], 2018, 1), [3.0, 4.0, 5.0], accuracy=0.8)

        summary = aggregate_reports([second, first])

        assert summary.totals["agent"] == 15.0
        assert summary.totals["P3"] == 5.0
        assert list(summary.series["agent"].cumulative) == [1.0, 3.0, 6.0, 10.0, 15.0]
        assert summary.series["agent"].timestamps[0] == pd.Timestamp("2017-01-01", tz="UTC")
        assert summary.mean_predictor_accuracy == pytest.approx(0.7)

    def test_explicit_pairs_excluded(self):
        sliding = fake_report(Fold.from_years([2015, 2016], 2017, 0), [1.0])
        explicit = fake_report(Fold.from_years([2015], 2020, 1, explicit=True), [100.0])

        summary = aggregate_reports([sliding, explicit])

        assert summary.totals["agent"] == 1.0

    def test_no_reports(self):
        summary = aggregate_reports([])

        assert summary.totals["agent"] == 0.0
        assert np.isnan(summary.mean_predictor_accuracy)


class TestManifestItems:
    def test_fingerprint_decisions_and_plan(self, small_config):
        plan = build_plan([2015, 2016, 2017])

        items = dict(manifest_items(small_config, plan))

        assert items["fingerprint"] == small_config.fingerprint()
        assert items["decision.ladder"] is False
        assert items["decision.da_energy_per_quarter"] == "s_da/4"
        assert items["plan.fold.2015-2016_to_2017"] == "train [2015-01-01, 2017-01-01) test [2017-01-01, 2018-01-01)"
        assert items["config.agent.episodes"] == 20

    def test_fold_entries(self, small_config):
        report = fake_report(short_fold(), [1.0])

        items = dict(manifest_items(small_config, reports=[report]))

        assert items["fold.short.observation_dim.bm"] == 98
        assert items["fold.short.seed"] == 7


class TestAccuracy:
    def test_fold_accuracy_is_a_fraction(self, feature_table, small_config):
        accuracy = fold_accuracy(feature_table, short_fold(), small_config)

        assert 0.0 <= accuracy <= 1.0

    def test_accuracy_frame_columns(self):
        frame = accuracy_frame([short_fold()], [0.75])

        assert list(frame.columns) == [
            "fold",
            "train_start",
            "train_end",
            "test_start",
            "test_end",
            "explicit",
            "accuracy",
        ]
        assert frame.loc[0, "test_start"] == "2015-01-06"


@pytest.mark.integration
class TestRunFold:
    """One fold fitted on its training window and evaluated out of sample."""

    def test_short_fold(self, feature_table, small_config, fitted):
        report = run_fold(short_fold(), feature_table, small_config, small_config.fingerprint())

        assert len(report.agent) == 48
        assert set(report.benchmarks) == {"P1", "P2", "P3", "P4", "P5"}
        assert all(s.timestamps.equals(report.agent.timestamps) for s in report.benchmarks.values())
        assert report.observation_dims == {"da": 384, "bm": 434}
        assert report.seed == 7
        assert report.checksums == fitted.checksums()
        assert np.isfinite(report.agent.total)

    def test_seed_follows_fold_index(self, feature_table, small_config):
        report = run_fold(short_fold(index=2), feature_table, small_config, "x")

        assert report.seed == 9

    def test_test_period_without_look_back(self, feature_table, small_config):
        fold = Fold("early", "2015-01-05", "2015-01-08", "2015-01-01", "2015-01-03")

        with pytest.raises(CoverageGap):
            run_fold(fold, feature_table, small_config, "x")

    def test_collect_trace_names_every_strategy(self, feature_table, small_config):
        report = run_fold(short_fold(), feature_table, small_config, "x", collect_trace=True)

        assert {row["strategy"] for row in report.trace} == {"agent", "P1", "P2", "P3", "P4", "P5"}


@pytest.mark.integration
class TestNoLookAhead:
    """Fitted artifacts depend only on training-window data."""

    @staticmethod
    def scale_rows(market, mask, factor: float = 2.0):
        scaled = {}
        for name in market.columns:
            if name == "regulation_state" or name in DERIVED_COLUMNS:
                continue
            values = market.column(name).copy()
            values[mask] = values[mask] * factor + 5000.0
            scaled[name] = values
        return market.with_columns(scaled)

    @pytest.mark.parametrize(
        "window",
        [("2015-01-02", "2015-01-06"), ("2015-01-05", "2015-01-09")],
        ids=["test-after-train", "test-before-train"],
    )
    def test_rows_outside_training_window_do_not_matter(self, synthetic_market, small_config, window):
        start, end = (pd.Timestamp(t, tz="UTC") for t in window)
        timestamps = synthetic_market.timestamps
        outside = np.asarray((timestamps < start) | (timestamps >= end))
        perturbed = self.scale_rows(synthetic_market, outside)

        clean = fit_on_window(prepare_feature_table(synthetic_market, small_config), (start, end), small_config, seed=7)
        refit = fit_on_window(prepare_feature_table(perturbed, small_config), (start, end), small_config, seed=7)

        assert refit.checksums() == clean.checksums()

    def test_training_window_shorter_than_lags(self, feature_table, small_config):
        with pytest.raises(CoverageGap):
            fit_on_window(feature_table, ("2015-01-02", "2015-01-02T12:00"), small_config, seed=7)


@pytest.mark.slow
class TestRunWalkForward:
    def test_three_year_run(self, small_config):
        config = small_config
        market = generate_synthetic_market(SynthConfig(days=1096, seed=5))
        plan = build_plan(market.years())

        result = run_walk_forward(plan, market, config, show_progress=False)

        (report,) = result.reports
        assert report.fold.fold_id == "2015-2016_to_2017"
        assert len(report.agent) == 365 * 24
        assert result.aggregate.totals["agent"] == pytest.approx(report.agent.total)
        assert result.explicit_reports == []


def stationary_policy_pnl(env: ArbitrageEnv, hours, s_da: float, p_bid: float, p_ask: float) -> float:
    """Unshaped P&L of repeating one (s_da, bid, ask) decision every hour."""
    total = 0.0
    for hour in hours:
        state = env.new_state(hour)
        env.apply_day_ahead(state, DaAction(s_da))
        while not state.done:
            env.settle_quarter(state, BmAction(p_bid, p_ask))
        total += state.cumulative_pnl
    return total


@pytest.mark.slow
class TestLearningOutcomes:
    """Trained agents against computable yardsticks on synthetic markets."""

    LEARNING_RUN = {
        "observation": {"lookback_days": 1},
        "agent": {
            "episodes": 20_000,
            "hidden_sizes": [32],
            "batch_size": 64,
            "replay_capacity": 20_000,
        },
    }

    def test_dual_agent_approaches_best_stationary_policy(self):
        """Surplus-only market: the out-of-sample P&L reaches 90% of the grid-search optimum."""
        config = RunConfig.model_validate(self.LEARNING_RUN)
        market = generate_synthetic_market(
            SynthConfig(
                days=10,
                seed=11,
                shortage_base_prob=0.0,
                balanced_prob=0.0,
                price_regimes=[PriceRegime(weight=1.0, da_mean=50.0, da_std=0.0)],
                surplus_bid_mean=-20.0,
                surplus_bid_std=60.0,
            )
        )
        features = prepare_feature_table(market, config)
        train_period = (pd.Timestamp("2015-01-03", tz="UTC"), pd.Timestamp("2015-01-08", tz="UTC"))
        test_period = (pd.Timestamp("2015-01-08", tz="UTC"), pd.Timestamp("2015-01-11", tz="UTC"))
        scaler = FeatureScaler.fit(features.slice_period(*train_period), observation_features(config))
        env = ArbitrageEnv(features, observation=config.observation, observation_table=scaler.transform(features))
        train_hours = env.observable_hours(env.hours_between(*train_period))
        test_hours = env.hours_between(*test_period)

        oracle = max(
            stationary_policy_pnl(env, test_hours, s_da, p_bid, p_ask)
            for s_da in np.linspace(20.0, 200.0, 10)
            for p_bid in np.arange(-200.0, 201.0, 10.0)
            for p_ask in (-200.0, 0.0, 200.0)
        )
        assert oracle > 0

        reached = []
        for seed in range(5):
            trained = train_dual_agents(env, train_hours, config.agent, seed=seed)
            evaluation = evaluate_dual_agents(env, test_hours, trained.da_agent, trained.bm_agent)
            reached.append(evaluation.series.total >= 0.9 * oracle)

        assert sum(reached) >= 3, reached

    def test_shaped_and_tranched_rewards_outperform_raw(self):
        """Averaged over five seeds, imitation beats raw and tranched beats single-price."""
        market = generate_synthetic_market(SynthConfig(days=12, seed=3))
        train_period = (pd.Timestamp("2015-01-02", tz="UTC"), pd.Timestamp("2015-01-10", tz="UTC"))
        test_period = (pd.Timestamp("2015-01-10", tz="UTC"), pd.Timestamp("2015-01-13", tz="UTC"))

        def mean_total(mode: str) -> float:
            totals = []
            for seed in range(5):
                config = RunConfig.model_validate(
                    {
                        **self.LEARNING_RUN,
                        "seed": seed,
                        "env": {"reward_mode": mode},
                        "agent": {**self.LEARNING_RUN["agent"], "episodes": 5000},
                    }
                )
                features = prepare_feature_table(market, config)
                fitted = fit_on_window(features, train_period, config, seed=seed)
                env, _ = build_environment(features, config, fitted.predictor, fitted.scaler)
                hours = env.hours_between(*test_period)
                totals.append(evaluate_dual_agents(env, hours, fitted.da_agent, fitted.bm_agent).series.total)
            return float(np.mean(totals))

        raw = mean_total("raw")

        assert mean_total("imitation") > raw
        assert mean_total("tranched") > raw
