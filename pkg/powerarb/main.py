#!/usr/bin/env python3
"""Main CLI entry point for the power arbitrage lab."""

import functools
import json
import logging
import sys
import traceback
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence

import click
import pandas as pd
from dateutil.parser import isoparse
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    SpinnerColumn,
    TextColumn,
    TimeElapsedColumn,
)
from rich.table import Table

from .checks import require_invariants, run_invariant_suites
from .config import RunConfig, load_run_config
from .data_storage import RunArtifactStore
from .ddpg import EvaluationResult, evaluate_dual_agents
from .environment import DaAction
from .errors import ChecksumMismatch, CoverageGap, MissingArtifact, PowerArbError
from .market_data import MarketTable, Resolution, load_market_table, save_market_table, to_utc
from .performance_tracker import PerformanceTracker
from .policies import BenchmarkId, PnlSeries, run_benchmark
from .reporting import AGENT_LABEL, ReportGenerator, RunReport, decision_histograms
from .state_predictor import fit_state_predictor, predictor_accuracy
from .synthetic import generate_synthetic_market
from .walkforward import (
    Fold,
    accuracy_frame,
    artifact_checksum,
    build_environment,
    check_coverage,
    fit_on_window,
    fold_accuracy,
    manifest_items,
    plan_from_config,
    prepare_feature_table,
    run_walk_forward,
    train_window_features,
)

console = Console()
logger = logging.getLogger(__name__)

CHECK_DAYS = 7


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=verbose)],
        force=True,
    )


def _parse_date(ctx, param, value: Optional[str]):
    if value is None:
        return None
    try:
        return to_utc(isoparse(value))
    except ValueError:
        raise click.BadParameter(f"'{value}' is not an ISO date") from None


def run_options(command: Callable) -> Callable:
    """Options shared by every command; the values arrive bundled as ``options``."""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file"),
        click.option("--seed", type=int, help="Master seed (default from config: 7)"),
        click.option(
            "--reward-mode",
            type=click.Choice(["raw", "imitation", "tranched", "tranched-imitation"]),
            help="Learning-signal variant",
        ),
        click.option("--ladder", is_flag=True, default=None, help="Tranche BM orders over price ladders"),
        click.option("--literal-eq1", is_flag=True, default=None, help="Charge the full DA position in every quarter"),
        click.option("--data", "data_path", help="Market CSV path"),
        click.option("--output-dir", "-o", help="Artifact directory"),
        click.option("--check", is_flag=True, help="Run the invariant suites after the command"),
        click.option("--verbose", "-v", is_flag=True, help="Debug logging and phase timings"),
    ]

    @functools.wraps(command)
    def wrapper(config_path, seed, reward_mode, ladder, literal_eq1, data_path, output_dir, check, verbose, **kwargs):
        _setup_logging(verbose)
        options = {
            "config_path": config_path,
            "overrides": {
                "seed": seed,
                "env.reward_mode": reward_mode,
                "env.ladder": True if ladder else None,
                "env.literal_eq1": True if literal_eq1 else None,
                "paths.data": data_path,
                "paths.output_dir": output_dir,
            },
            "check": check,
            "verbose": verbose,
        }
        try:
            command(options, **kwargs)
        except PowerArbError as e:
            _fail(e.to_record(), verbose)
        except (OSError, ValueError) as e:
            _fail({"code": "unexpected_error", "message": str(e), "key": None}, verbose)

    for option in reversed(options):
        wrapper = option(wrapper)
    return wrapper


def _fail(record: Dict[str, Any], verbose: bool) -> None:
    console.print(f"[red]Error: {record['message']}[/red]")
    if verbose:
        console.print(traceback.format_exc())
    click.echo(json.dumps(record), err=True)
    sys.exit(1)


def _config(options: Dict[str, Any], extra: Optional[Dict[str, Any]] = None) -> RunConfig:
    overrides = dict(options["overrides"])
    overrides.update(extra or {})
    return load_run_config(options["config_path"], overrides)


def _load_market(config: RunConfig) -> MarketTable:
    path = Path(config.paths.data)
    if not path.exists():
        raise MissingArtifact(f"Market data {path} not found; run 'synth' or 'ingest' first", key=str(path))
    return load_market_table(str(path))


def _run_checks(options: Dict[str, Any], config: RunConfig, market: Optional[MarketTable]) -> None:
    if not options["check"]:
        return
    if market is not None:
        start = to_utc(market.period[0])
        market = market.slice_period(start, min(to_utc(market.period[1]), start + pd.Timedelta(days=CHECK_DAYS)))
    results = run_invariant_suites(market, seed=config.seed)

    table = Table(title="Invariant suites")
    table.add_column("Suite", style="cyan")
    table.add_column("Cases", justify="right")
    table.add_column("Result")
    for result in results:
        table.add_row(result.name, str(result.cases), "[green]ok[/green]" if result.passed else f"[red]{result.detail}[/red]")
    console.print(table)
    require_invariants(results)


@contextmanager
def _episode_progress(description: str, total: int, enabled: bool = True) -> Iterator[Callable[[int], None]]:
    with Progress(
        SpinnerColumn(),
        TextColumn("[bold blue]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
        transient=True,
        disable=not enabled or total <= 0,
    ) as progress:
        task = progress.add_task(description, total=max(total, 1))
        yield lambda _episode: progress.advance(task)


def _resolve_fold(
    market: MarketTable,
    config: RunConfig,
    store: RunArtifactStore,
    train_start=None,
    train_end=None,
    test_start=None,
    test_end=None,
) -> Fold:
    """CLI dates win; then the periods the last ``train`` recorded; then the first planned fold."""
    given = [train_start, train_end, test_start, test_end]
    defaults: List[Any] = [None] * 4
    if store.exists("manifest.txt"):
        manifest = store.read_manifest()
        keys = ["train.start", "train.end", "test.start", "test.end"]
        if all(k in manifest for k in keys):
            defaults = [to_utc(manifest[k]) for k in keys]
    if any(g is None and d is None for g, d in zip(given, defaults)):
        planned = plan_from_config(market, config).folds[0]
        planned_periods = [planned.train_start, planned.train_end, planned.test_start, planned.test_end]
        defaults = [d if d is not None else p for d, p in zip(defaults, planned_periods)]
    resolved = [g if g is not None else d for g, d in zip(given, defaults)]
    return Fold("cli", *resolved)


def _verify_checksums(store: RunArtifactStore, texts: Dict[str, str]) -> None:
    """Loaded artifacts must match the checksums the last `train` recorded."""
    if not store.exists("manifest.txt"):
        return
    manifest = store.read_manifest()
    for name, text in texts.items():
        expected = manifest.get(f"checksum.{name}")
        if expected is not None and expected != artifact_checksum(text):
            raise ChecksumMismatch(
                f"Stored {name} does not match the manifest written by 'train'", key=f"checksum.{name}"
            )


def _fold_items(fold: Fold) -> List[tuple]:
    return [
        ("train.start", fold.train_start.isoformat()),
        ("train.end", fold.train_end.isoformat()),
        ("test.start", fold.test_start.isoformat()),
        ("test.end", fold.test_end.isoformat()),
    ]


def _period_options(command: Callable) -> Callable:
    for name in ("--test-end", "--test-start", "--train-end", "--train-start"):
        command = click.option(name, callback=_parse_date, help="ISO date (UTC)")(command)
    return command


def _print_totals(totals: Dict[str, float]) -> None:
    table = Table(title="Total P&L")
    table.add_column("Strategy", style="cyan")
    table.add_column("EUR", justify="right")
    for label, total in totals.items():
        table.add_row(label, f"{total:,.2f}")
    console.print(table)


@click.group()
def cli():
    """Power arbitrage lab: day-ahead and balancing market trading with dual DDPG agents."""
    pass


@cli.command()
@run_options
@click.option("--days", type=int, help="Days to generate (default from config: 1096)")
def synth(options, days: Optional[int]):
    """Generate a deterministic synthetic market table."""
    extra = {"synth.days": days}
    if options["overrides"]["seed"] is not None:
        extra["synth.seed"] = options["overrides"]["seed"]
    config = _config(options, extra)
    tracker = PerformanceTracker()
    tracker.start_run()
    with tracker.phase("synthesize"):
        market = generate_synthetic_market(config.synth)
    path = Path(config.paths.data)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_market_table(market, str(path))
    console.print(f"[green]✓ {len(market)} quarter-hour rows written to {path}[/green]")
    _run_checks(options, config, market)
    if options["verbose"]:
        tracker.print_live_stats()


@cli.command()
@run_options
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.option("--hourly", is_flag=True, help="Source is hourly; repeat rows for each quarter")
def ingest(options, source: str, hourly: bool):
    """Validate a market CSV and store it as the run's market data."""
    config = _config(options)
    resolution = Resolution.HOURLY if hourly else Resolution.QUARTER_HOURLY
    market = load_market_table(source, resolution=resolution, forward_fill_to_quarter=hourly)
    path = Path(config.paths.data)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_market_table(market, str(path))
    start, end = market.period
    console.print(f"[green]✓ {len(market)} rows [{start} .. {end}) ingested into {path}[/green]")
    _run_checks(options, config, market)


@cli.command("fit-predictor")
@run_options
@_period_options
def fit_predictor(options, train_start, train_end, test_start, test_end):
    """Fit the shortage predictor on the training period and report accuracy per fold."""
    config = _config(options)
    store = RunArtifactStore(config.paths.output_dir)
    market = _load_market(config)
    features = prepare_feature_table(market, config)
    fold = _resolve_fold(market, config, store, train_start, train_end, test_start, test_end)

    predictor = fit_state_predictor(
        train_window_features(features, fold.train_period, config),
        config.predictor.features,
        config.predictor,
    )
    accuracy = predictor_accuracy(
        predictor, features.slice_period(*fold.test_period), config.predictor.threshold
    )
    store.save_predictor(predictor)
    console.print(f"[green]✓ Predictor fitted; out-of-sample accuracy {accuracy:.3f}[/green]")

    try:
        plan = plan_from_config(market, config)
    except PowerArbError as e:
        console.print(f"[yellow]⚠️  No walk-forward accuracy table: {e.message}[/yellow]")
    else:
        folds = plan.all_folds
        store.save_frame(
            "predictor_accuracy.csv",
            accuracy_frame(folds, [fold_accuracy(features, f, config) for f in folds]),
        )
    _run_checks(options, config, market)


@cli.command()
@run_options
@_period_options
@click.option("--episodes", type=int, help="Training episodes (default from config: 50000)")
def train(options, train_start, train_end, test_start, test_end, episodes: Optional[int]):
    """Train both agents on the training period and store their checkpoints."""
    config = _config(options, {"agent.episodes": episodes})
    store = RunArtifactStore(config.paths.output_dir)
    market = _load_market(config)
    tracker = PerformanceTracker()
    tracker.start_run()

    features = prepare_feature_table(market, config)
    fold = _resolve_fold(market, config, store, train_start, train_end, test_start, test_end)
    with tracker.phase("train"), _episode_progress("Training", config.agent.episodes) as tick:
        fitted = fit_on_window(features, fold.train_period, config, config.seed, tick)

    store.save_predictor(fitted.predictor)
    store.save_scaler(fitted.scaler)
    store.save_agent(fitted.da_agent)
    store.save_agent(fitted.bm_agent)
    store.save_curve(fitted.curve)
    items = manifest_items(config) + _fold_items(fold)
    items += [(f"checksum.{name}", value) for name, value in fitted.checksums().items()]
    items += [
        ("observation_dim.da", fitted.da_agent.observation_dim),
        ("observation_dim.bm", fitted.bm_agent.observation_dim),
        ("train.hours", len(fitted.train_hours)),
    ]
    items += sorted(tracker.get_performance_stats().manifest_items().items())
    store.write_manifest(items)

    if len(fitted.curve):
        console.print(
            f"[green]✓ {len(fitted.curve)} episodes; final moving average "
            f"{fitted.curve.moving_average[-1]:.2f} EUR[/green]"
        )
    else:
        console.print("[yellow]⚠️  No episodes run; agents are freshly initialized[/yellow]")
    _run_checks(options, config, market)
    if options["verbose"]:
        tracker.print_live_stats()


@cli.command()
@run_options
@_period_options
@click.option("--trace", is_flag=True, help="Export the per-step episode trace")
def evaluate(options, train_start, train_end, test_start, test_end, trace: bool):
    """Play the trained agents greedily over the test period."""
    config = _config(options)
    store = RunArtifactStore(config.paths.output_dir)
    market = _load_market(config)
    features = prepare_feature_table(market, config)
    fold = _resolve_fold(market, config, store, train_start, train_end, test_start, test_end)
    check_coverage(features, fold, config.observation.lookback_days)

    predictor = store.load_predictor()
    scaler = store.load_scaler()
    da_agent = store.load_agent("da", config=config.agent)
    bm_agent = store.load_agent("bm", config=config.agent)
    _verify_checksums(
        store,
        {
            "predictor": predictor.to_key_value_text(),
            "scaler": scaler.to_key_value_text(),
            "da_agent": da_agent.to_text(),
            "bm_agent": bm_agent.to_text(),
        },
    )
    env, _ = build_environment(features, config, predictor, scaler)
    hours = env.hours_between(*fold.test_period)
    if env.observable_hours(hours) != hours:
        raise CoverageGap("Some test hours lack look-back history", key="test.start")

    evaluation = evaluate_dual_agents(env, hours, da_agent, bm_agent, collect_trace=trace)
    store.save_pnl(evaluation.series)
    store.save_decisions(evaluation)
    if trace:
        store.save_trace(evaluation.trace, AGENT_LABEL)
    console.print(
        f"[green]✓ Agent P&L {evaluation.series.total:,.2f} EUR over {len(evaluation.series)} hours[/green]"
    )
    _run_checks(options, config, market)


@cli.command()
@run_options
@_period_options
@click.option("--trace", is_flag=True, help="Export the per-step episode trace")
def benchmark(options, train_start, train_end, test_start, test_end, trace: bool):
    """Replay the benchmark policies P1-P5 over the test period."""
    config = _config(options)
    store = RunArtifactStore(config.paths.output_dir)
    market = _load_market(config)
    features = prepare_feature_table(market, config)
    fold = _resolve_fold(market, config, store, train_start, train_end, test_start, test_end)

    hints: Dict[int, DaAction] = {}
    if store.exists("decisions_da.csv"):
        decisions, _ = store.load_decisions()
        hints = {int(h): DaAction(float(s)) for h, s in zip(decisions["hour_index"], decisions["s_da"])}
    else:
        console.print("[yellow]⚠️  No agent decisions found; P4 falls back to a fixed DA position[/yellow]")

    rows: List[Dict[str, Any]] = []
    totals = {}
    for benchmark_id in BenchmarkId:
        series = run_benchmark(
            benchmark_id,
            features,
            fold.test_period,
            hydrogen_price=config.env.hydrogen_price,
            literal_eq1=config.env.literal_eq1,
            da_hints=hints if benchmark_id is BenchmarkId.P4 else None,
            trace=rows if trace else None,
        )
        store.save_pnl(series)
        totals[series.label] = series.total
    if trace:
        store.save_trace(rows, "benchmarks")
    _print_totals(totals)
    _run_checks(options, config, market)


@cli.command("walk-forward")
@run_options
@click.option("--trace", is_flag=True, help="Export per-fold episode traces")
def walk_forward(options, trace: bool):
    """Train and evaluate every fold of the plan; write aggregate and per-fold results."""
    config = _config(options)
    store = RunArtifactStore(config.paths.output_dir)
    market = _load_market(config)
    tracker = PerformanceTracker()
    tracker.start_run()

    plan = plan_from_config(market, config)
    console.print(f"[cyan]📊 {len(plan.folds)} sliding folds, {len(plan.explicit_pairs)} explicit pairs[/cyan]")
    result = run_walk_forward(plan, market, config, tracker, collect_trace=trace)

    for report in result.reports + result.explicit_reports:
        prefix = f"fold_{report.fold.fold_id}_"
        store.save_frame(f"{prefix}pnl_agent.csv", report.agent.to_frame())
        for label, series in report.benchmarks.items():
            store.save_frame(f"{prefix}pnl_{label}.csv", series.to_frame())
        store.save_curve(report.curve, f"{prefix}training_curve.csv")
        store.save_agent(report.da_agent, prefix)
        store.save_agent(report.bm_agent, prefix)
        store.save_predictor(report.predictor, f"{prefix}predictor.txt")
        if trace:
            store.save_trace(report.trace, report.fold.fold_id)

    for series in result.aggregate.series.values():
        store.save_pnl(series)
    store.save_decisions(_combined_evaluation(result.aggregate.series[AGENT_LABEL], result.reports))
    all_reports = result.reports + result.explicit_reports
    store.save_frame(
        "predictor_accuracy.csv",
        accuracy_frame([r.fold for r in all_reports], [r.predictor_accuracy for r in all_reports]),
    )
    stats = tracker.get_performance_stats()
    store.save_performance_stats(stats)
    store.write_manifest(manifest_items(config, plan, all_reports) + sorted(stats.manifest_items().items()))

    _print_totals(result.aggregate.totals)
    _run_checks(options, config, market)
    if options["verbose"]:
        tracker.print_live_stats()


def _combined_evaluation(series: PnlSeries, reports: Sequence[Any]) -> EvaluationResult:
    da_actions: Dict[int, float] = {}
    bids: List[float] = []
    asks: List[float] = []
    for report in sorted(reports, key=lambda r: r.fold.test_start):
        da_actions.update(report.evaluation.da_actions)
        bids.extend(report.evaluation.bid_prices)
        asks.extend(report.evaluation.ask_prices)
    return EvaluationResult(series, da_actions, bids, asks)


@cli.command()
@run_options
@click.option("--no-plots", is_flag=True, help="Skip PNG renders")
def report(options, no_plots: bool):
    """Render curves, histograms and the summary table from stored results."""
    config = _config(options)
    store = RunArtifactStore(config.paths.output_dir)
    labels = store.pnl_labels()
    if AGENT_LABEL not in labels:
        store.require(f"pnl_{AGENT_LABEL}.csv")
    ordered = [AGENT_LABEL] + [label for label in labels if label != AGENT_LABEL]
    series = {label: store.load_pnl(label) for label in ordered}

    histograms = []
    if store.exists("decisions_da.csv"):
        da, bm = store.load_decisions()
        histograms = decision_histograms(
            series[AGENT_LABEL].hourly,
            da["s_da"].to_numpy(),
            bm["bid_price"].to_numpy(),
            bm["ask_price"].to_numpy(),
        )
    manifest = store.read_manifest() if store.exists("manifest.txt") else {}
    run_report = RunReport(
        fingerprint=manifest.get("fingerprint", config.fingerprint()),
        series=series,
        histograms=histograms,
        manifest=manifest,
        accuracy=store.load_frame("predictor_accuracy.csv") if store.exists("predictor_accuracy.csv") else None,
    )
    paths = ReportGenerator(store).generate(run_report, plots=not no_plots)

    table = Table(title=f"Run {run_report.fingerprint[:12]}")
    table.add_column("Strategy", style="cyan")
    table.add_column("Total P&L (EUR)", justify="right")
    table.add_column("vs best benchmark", justify="right")
    for row in run_report.summary():
        table.add_row(row.label, f"{row.total:,.2f}", row.vs_best_text)
    console.print(table)
    console.print(f"[green]✓ {len(paths)} report files written to {store.output_dir}[/green]")
    _run_checks(options, config, None)


if __name__ == "__main__":
    cli()
