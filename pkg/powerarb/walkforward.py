"""Walk-forward evaluation: year folds, per-fold fitting on train only, reports."""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from rich.console import Console
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    SpinnerColumn,
    TextColumn,
    TimeElapsedColumn,
)

from .config import ExplicitPair, RunConfig
from .ddpg import EvaluationResult, TrainingCurve, evaluate_dual_agents, train_dual_agents
from .environment import ArbitrageEnv, DaAction, RewardMode
from .errors import CoverageGap, InsufficientYears, InvalidConfig
from .market_data import (
    FeatureScaler,
    Level,
    LagSpec,
    MarketTable,
    build_lagged_features,
    lag_column_name,
    observation_dimension,
    to_utc,
)
from .performance_tracker import PerformanceTracker
from .policies import BenchmarkId, PnlSeries, run_benchmark
from .state_predictor import (
    StatePredictor,
    fit_state_predictor,
    predict_table,
    predictor_accuracy,
)

console = Console()
logger = logging.getLogger(__name__)

SHORTAGE_PROB_COLUMN = "shortage_prob"


@dataclass(frozen=True)
class Fold:
    """One train/test split as half-open UTC periods."""

    fold_id: str
    train_start: pd.Timestamp
    train_end: pd.Timestamp
    test_start: pd.Timestamp
    test_end: pd.Timestamp
    index: int = 0
    explicit: bool = False

    def __post_init__(self):
        for name in ("train_start", "train_end", "test_start", "test_end"):
            object.__setattr__(self, name, to_utc(getattr(self, name)))
        if self.train_start >= self.train_end or self.test_start >= self.test_end:
            raise InvalidConfig(f"Fold {self.fold_id} has an empty period", key=self.fold_id)
        if self.train_start < self.test_end and self.test_start < self.train_end:
            raise InvalidConfig(
                f"Fold {self.fold_id}: train and test periods overlap", key=self.fold_id
            )

    @classmethod
    def from_years(
        cls, train_years: Sequence[int], test_year: int, index: int, test_len: int = 1, explicit: bool = False
    ) -> "Fold":
        train_years = sorted(train_years)
        if train_years != list(range(train_years[0], train_years[-1] + 1)):
            raise InvalidConfig(f"Training years {train_years} are not contiguous", key="plan")
        label = f"{train_years[0]}-{train_years[-1]}" if len(train_years) > 1 else f"{train_years[0]}"
        return cls(
            fold_id=f"{label}_to_{test_year}",
            train_start=pd.Timestamp(year=train_years[0], month=1, day=1, tz="UTC"),
            train_end=pd.Timestamp(year=train_years[-1] + 1, month=1, day=1, tz="UTC"),
            test_start=pd.Timestamp(year=test_year, month=1, day=1, tz="UTC"),
            test_end=pd.Timestamp(year=test_year + test_len, month=1, day=1, tz="UTC"),
            index=index,
            explicit=explicit,
        )

    @property
    def train_period(self) -> Tuple[pd.Timestamp, pd.Timestamp]:
        return self.train_start, self.train_end

    @property
    def test_period(self) -> Tuple[pd.Timestamp, pd.Timestamp]:
        return self.test_start, self.test_end


@dataclass
class WalkForwardPlan:
    """Sliding folds ordered by test period, plus explicit experiments."""

    folds: List[Fold]
    explicit_pairs: List[Fold] = field(default_factory=list)

    @property
    def all_folds(self) -> List[Fold]:
        return self.folds + self.explicit_pairs


def build_plan(
    available_years: Sequence[int],
    train_len: int = 2,
    test_len: int = 1,
    explicit_pairs: Optional[Sequence[ExplicitPair]] = None,
) -> WalkForwardPlan:
    """Maximal sequence of folds shifted by ``test_len`` years."""
    years = sorted(set(int(y) for y in available_years))
    if train_len < 1 or test_len < 1:
        raise InvalidConfig("train_len and test_len must be >= 1", key="plan.train_len")
    if years and years != list(range(years[0], years[-1] + 1)):
        raise InsufficientYears(f"Years {years} are not contiguous", key="plan.years")
    if len(years) < train_len + test_len:
        raise InsufficientYears(
            f"{len(years)} years available, a fold needs {train_len + test_len}",
            key="plan.years",
        )
    folds = [
        Fold.from_years(years[start : start + train_len], years[start + train_len], index, test_len)
        for index, start in enumerate(range(0, len(years) - train_len - test_len + 1, test_len))
    ]
    explicit = [
        Fold.from_years(pair.train_years, pair.test_year, len(folds) + k, explicit=True)
        for k, pair in enumerate(explicit_pairs or [])
    ]
    return WalkForwardPlan(folds, explicit)


def prepare_feature_table(market: MarketTable, config: RunConfig) -> MarketTable:
    """Append the configured lag columns; rows without full lags are dropped."""
    return build_lagged_features(market, LagSpec.of(config.observation.lags))


def train_window_features(
    features: MarketTable, train_period: Tuple[Any, Any], config: RunConfig
) -> MarketTable:
    """Lag columns rebuilt from the training rows alone.

    The first max-lag rows of the window drop out, so nothing fitted on the
    result depends on data outside ``train_period``.
    """
    spec = LagSpec.of(config.observation.lags)
    lagged = [lag_column_name(name, lag) for name, lag in spec.entries]
    window = features.slice_period(*train_period).without_columns(lagged)
    if spec.max_lag >= len(window):
        raise CoverageGap(
            f"Training window [{to_utc(train_period[0]).date()}, {to_utc(train_period[1]).date()}) "
            f"holds {len(window)} rows, lags need more than {spec.max_lag}",
            key="train.start",
        )
    return build_lagged_features(window, spec)


def observation_features(config: RunConfig) -> List[str]:
    seen: Dict[str, None] = {}
    for name in [*config.observation.da_features, *config.observation.bm_features]:
        seen.setdefault(name, None)
    return list(seen)


def artifact_checksum(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class FittedArtifacts:
    """Everything fitted on one training window.

    ``env`` spans the training window only; ``train_hours`` index into it.
    """

    predictor: StatePredictor
    scaler: FeatureScaler
    env: ArbitrageEnv
    train_hours: List[int]
    curve: TrainingCurve
    da_agent: Any
    bm_agent: Any
    seed: int

    def checksums(self) -> Dict[str, str]:
        return {
            "predictor": artifact_checksum(self.predictor.to_key_value_text()),
            "scaler": artifact_checksum(self.scaler.to_key_value_text()),
            "da_agent": artifact_checksum(self.da_agent.to_text()),
            "bm_agent": artifact_checksum(self.bm_agent.to_text()),
        }


def build_environment(
    features: MarketTable,
    config: RunConfig,
    predictor: StatePredictor,
    scaler: Optional[FeatureScaler] = None,
) -> Tuple[ArbitrageEnv, FeatureScaler]:
    """Environment over ``features`` with standardized observations.

    Without a ``scaler`` one is fitted on ``features`` itself; pass the training
    table when fitting and the stored scaler when evaluating.
    """
    with_prob = features.with_columns({SHORTAGE_PROB_COLUMN: predict_table(predictor, features)})
    if scaler is None:
        scaler = FeatureScaler.fit(with_prob, observation_features(config))
    env = ArbitrageEnv(
        with_prob,
        observation=config.observation,
        observation_table=scaler.transform(with_prob),
        hydrogen_price=config.env.hydrogen_price,
        literal_eq1=config.env.literal_eq1,
        reward_mode=RewardMode(config.env.reward_mode),
        ladder=config.env.ladder,
    )
    return env, scaler


def fit_on_window(
    features: MarketTable,
    train_period: Tuple[Any, Any],
    config: RunConfig,
    seed: int,
    on_episode: Optional[Callable[[int], None]] = None,
) -> FittedArtifacts:
    """Fit predictor, scaler and both agents on the training window's rows only."""
    train = train_window_features(features, train_period, config)
    predictor = fit_state_predictor(train, config.predictor.features, config.predictor)
    env, scaler = build_environment(train, config, predictor)
    train_hours = env.observable_hours(range(env.n_hours))
    if not train_hours:
        raise CoverageGap(
            f"Training window [{to_utc(train_period[0]).date()}, {to_utc(train_period[1]).date()}) "
            f"is shorter than lags plus a {config.observation.lookback_days}-day look-back",
            key="train.start",
        )
    result = train_dual_agents(env, train_hours, config.agent, seed, on_episode)
    return FittedArtifacts(
        predictor=predictor,
        scaler=scaler,
        env=env,
        train_hours=train_hours,
        curve=result.curve,
        da_agent=result.da_agent,
        bm_agent=result.bm_agent,
        seed=seed,
    )


@dataclass
class FoldReport:
    """Out-of-sample results of one fold."""

    fold: Fold
    agent: PnlSeries
    benchmarks: Dict[str, PnlSeries]
    predictor_accuracy: float
    fingerprint: str
    seed: int
    checksums: Dict[str, str]
    observation_dims: Dict[str, int]
    curve: TrainingCurve
    evaluation: EvaluationResult
    trace: List[Dict[str, Any]] = field(default_factory=list)
    predictor: Optional[StatePredictor] = None
    da_agent: Any = None
    bm_agent: Any = None

    def totals(self) -> Dict[str, float]:
        totals = {"agent": self.agent.total}
        totals.update({label: s.total for label, s in self.benchmarks.items()})
        return totals


def check_coverage(features: MarketTable, fold: Fold, lookback_days: int) -> None:
    start, end = (to_utc(t) for t in features.period)
    margin = pd.Timedelta(days=lookback_days)
    if fold.test_start < start + margin or fold.test_end > end:
        raise CoverageGap(
            f"Fold {fold.fold_id}: test period [{fold.test_start.date()}, {fold.test_end.date()}) "
            f"plus {lookback_days}-day look-back not covered by data "
            f"[{start.date()}, {end.date()})",
            key=fold.fold_id,
        )
    if fold.train_end <= start or fold.train_start >= end:
        raise CoverageGap(
            f"Fold {fold.fold_id}: no training data in [{fold.train_start.date()}, "
            f"{fold.train_end.date()})",
            key=fold.fold_id,
        )


def run_fold(
    fold: Fold,
    features: MarketTable,
    config: RunConfig,
    fingerprint: str,
    collect_trace: bool = False,
    tracker: Optional[PerformanceTracker] = None,
    on_episode: Optional[Callable[[int], None]] = None,
) -> FoldReport:
    """Fit on the fold's training window, then evaluate agent and benchmarks on its test window."""
    tracker = tracker or PerformanceTracker()
    check_coverage(features, fold, config.observation.lookback_days)
    seed = config.seed + fold.index

    with tracker.phase(f"fold_{fold.fold_id}.train"):
        fitted = fit_on_window(features, fold.train_period, config, seed, on_episode)

    with tracker.phase(f"fold_{fold.fold_id}.evaluate"):
        env, _ = build_environment(features, config, fitted.predictor, fitted.scaler)
        test_hours = env.hours_between(*fold.test_period)
        observable = env.observable_hours(test_hours)
        if observable != test_hours:
            raise CoverageGap(
                f"Fold {fold.fold_id}: {len(test_hours) - len(observable)} test hours lack look-back",
                key=fold.fold_id,
            )
        evaluation = evaluate_dual_agents(
            env, test_hours, fitted.da_agent, fitted.bm_agent, collect_trace=collect_trace
        )

    with tracker.phase(f"fold_{fold.fold_id}.benchmark"):
        hints = {hour: DaAction(s_da) for hour, s_da in evaluation.da_actions.items()}
        trace = list(evaluation.trace)
        benchmarks = {}
        for benchmark_id in BenchmarkId:
            benchmarks[benchmark_id.value] = run_benchmark(
                benchmark_id,
                features,
                fold.test_period,
                hydrogen_price=config.env.hydrogen_price,
                literal_eq1=config.env.literal_eq1,
                da_hints=hints if benchmark_id is BenchmarkId.P4 else None,
                trace=trace if collect_trace else None,
            )

    for label, series in benchmarks.items():
        if not series.timestamps.equals(evaluation.series.timestamps):
            raise CoverageGap(
                f"Fold {fold.fold_id}: {label} covers {len(series)} hours, agent {len(evaluation.series)}",
                key=label,
            )

    test_table = features.slice_period(*fold.test_period)
    accuracy = predictor_accuracy(fitted.predictor, test_table, config.predictor.threshold)
    resolution = features.resolution
    lookback = config.observation.lookback_days
    report = FoldReport(
        fold=fold,
        agent=evaluation.series,
        benchmarks=benchmarks,
        predictor_accuracy=accuracy,
        fingerprint=fingerprint,
        seed=seed,
        checksums=fitted.checksums(),
        observation_dims={
            "da": observation_dimension(len(config.observation.da_features), Level.DAY_AHEAD, lookback, resolution),
            "bm": observation_dimension(len(config.observation.bm_features), Level.BALANCING, lookback, resolution) + 2,
        },
        curve=fitted.curve,
        evaluation=evaluation,
        trace=trace,
        predictor=fitted.predictor,
        da_agent=fitted.da_agent,
        bm_agent=fitted.bm_agent,
    )
    logger.info(
        f"Fold {fold.fold_id}: agent {report.agent.total:.2f} EUR over {len(report.agent)} hours, "
        f"predictor accuracy {accuracy:.3f}"
    )
    return report


@dataclass
class AggregateSummary:
    """Concatenated out-of-sample results of the sliding folds."""

    series: Dict[str, PnlSeries]
    totals: Dict[str, float]
    mean_predictor_accuracy: float


def aggregate_reports(reports: Sequence[FoldReport]) -> AggregateSummary:
    """Sequential reduce over folds in test order; totals are sums of fold totals."""
    ordered = sorted((r for r in reports if not r.fold.explicit), key=lambda r: r.fold.test_start)
    labels = ["agent", *[b.value for b in BenchmarkId]]
    series, totals = {}, {}
    for label in labels:
        parts = [r.agent if label == "agent" else r.benchmarks[label] for r in ordered]
        series[label] = PnlSeries.concatenate(label, parts)
        totals[label] = sum(part.total for part in parts)
    accuracies = [r.predictor_accuracy for r in ordered if np.isfinite(r.predictor_accuracy)]
    return AggregateSummary(
        series=series,
        totals=totals,
        mean_predictor_accuracy=float(np.mean(accuracies)) if accuracies else float("nan"),
    )


@dataclass
class WalkForwardResult:
    plan: WalkForwardPlan
    reports: List[FoldReport]
    explicit_reports: List[FoldReport]
    aggregate: AggregateSummary


def run_walk_forward(
    plan: WalkForwardPlan,
    market: MarketTable,
    config: RunConfig,
    tracker: Optional[PerformanceTracker] = None,
    collect_trace: bool = False,
    show_progress: bool = True,
) -> WalkForwardResult:
    """Run every fold, in parallel when ``plan.workers`` > 1, and aggregate."""
    tracker = tracker or PerformanceTracker()
    fingerprint = config.fingerprint()
    with tracker.phase("features"):
        features = prepare_feature_table(market, config)
    for fold in plan.all_folds:
        check_coverage(features, fold, config.observation.lookback_days)

    folds = plan.all_folds
    reports: Dict[str, FoldReport] = {}
    with Progress(
        SpinnerColumn(),
        TextColumn("[bold blue]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
        transient=True,
        disable=not show_progress,
    ) as progress:
        task = progress.add_task("Training folds", total=len(folds) * max(1, config.agent.episodes))

        def tick(_episode: int) -> None:
            progress.advance(task)

        with ThreadPoolExecutor(max_workers=max(1, config.plan.workers)) as executor:
            future_to_fold = {
                executor.submit(
                    run_fold, fold, features, config, fingerprint, collect_trace, tracker, tick
                ): fold
                for fold in folds
            }
            for future in as_completed(future_to_fold):
                fold = future_to_fold[future]
                reports[fold.fold_id] = future.result()

    sliding = [reports[f.fold_id] for f in plan.folds]
    explicit = [reports[f.fold_id] for f in plan.explicit_pairs]
    return WalkForwardResult(plan, sliding, explicit, aggregate_reports(sliding))


def plan_from_config(market: MarketTable, config: RunConfig) -> WalkForwardPlan:
    years = config.plan.years or market.years()
    return build_plan(years, config.plan.train_len, config.plan.test_len, config.plan.explicit_pairs)


def manifest_items(
    config: RunConfig, plan: Optional[WalkForwardPlan] = None, reports: Sequence[FoldReport] = ()
) -> List[Tuple[str, Any]]:
    """Key-value run manifest: fingerprint, decisions, plan, dimensions, config."""
    items: List[Tuple[str, Any]] = [
        ("fingerprint", config.fingerprint()),
        ("seed", config.seed),
        ("decision.reward_mode", config.env.reward_mode),
        ("decision.ladder", config.env.ladder or RewardMode(config.env.reward_mode).uses_ladder),
        ("decision.literal_eq1", config.env.literal_eq1),
        ("decision.da_energy_per_quarter", "s_da" if config.env.literal_eq1 else "s_da/4"),
    ]
    if plan is not None:
        for fold in plan.all_folds:
            items.append(
                (
                    f"plan.fold.{fold.fold_id}",
                    f"train [{fold.train_start.date()}, {fold.train_end.date()}) "
                    f"test [{fold.test_start.date()}, {fold.test_end.date()})"
                    + (" explicit" if fold.explicit else ""),
                )
            )
    for report in reports:
        prefix = f"fold.{report.fold.fold_id}"
        items.append((f"{prefix}.seed", report.seed))
        items.append((f"{prefix}.observation_dim.da", report.observation_dims["da"]))
        items.append((f"{prefix}.observation_dim.bm", report.observation_dims["bm"]))
        items.append((f"{prefix}.predictor_accuracy", report.predictor_accuracy))
        for name, checksum in report.checksums.items():
            items.append((f"{prefix}.checksum.{name}", checksum))
    items.extend((f"config.{key}", value) for key, value in config.flat_items())
    return items


def fold_accuracy(features: MarketTable, fold: Fold, config: RunConfig) -> float:
    """Out-of-sample accuracy of a predictor fitted on the fold's training window only."""
    train = train_window_features(features, fold.train_period, config)
    predictor = fit_state_predictor(train, config.predictor.features, config.predictor)
    return predictor_accuracy(
        predictor, features.slice_period(*fold.test_period), config.predictor.threshold
    )


def accuracy_frame(folds: Sequence[Fold], accuracies: Sequence[float]) -> pd.DataFrame:
    """Predictor accuracy per (train, test) pair."""
    return pd.DataFrame(
        {
            "fold": [f.fold_id for f in folds],
            "train_start": [f.train_start.strftime("%Y-%m-%d") for f in folds],
            "train_end": [f.train_end.strftime("%Y-%m-%d") for f in folds],
            "test_start": [f.test_start.strftime("%Y-%m-%d") for f in folds],
            "test_end": [f.test_end.strftime("%Y-%m-%d") for f in folds],
            "explicit": [f.explicit for f in folds],
            "accuracy": list(accuracies),
        }
    )
