"""Run reports: histogram and curve data files, summary table, HTML and optional PNGs."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from jinja2 import DictLoader, Environment, select_autoescape

from .data_storage import RunArtifactStore
from .environment import BM_PRICE_LIMIT, DA_MAX_MWH, DA_MIN_MWH
from .errors import CoverageGap
from .policies import BenchmarkId, PnlSeries

logger = logging.getLogger(__name__)

AGENT_LABEL = "agent"
DA_ACTION_EDGES = np.linspace(DA_MIN_MWH, DA_MAX_MWH, 19)
BM_PRICE_EDGES = np.linspace(-BM_PRICE_LIMIT, BM_PRICE_LIMIT, 21)
PNL_BINS = 40


@dataclass
class Histogram:
    """Binned counts; ``edges`` has one more entry than ``counts``."""

    name: str
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def rows(self) -> List[Tuple[float, float, int]]:
        return [
            (float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i]))
            for i in range(len(self.counts))
        ]


def histogram(name: str, values: Sequence[float], bins: Union[int, np.ndarray]) -> Histogram:
    """Histogram of ``values``; fixed edges clip out-of-range values into the end bins."""
    values = np.asarray(values, dtype=np.float64)
    if isinstance(bins, np.ndarray):
        values = np.clip(values, bins[0], bins[-1])
        counts, edges = np.histogram(values, bins=bins)
    elif len(values) == 0:
        counts, edges = np.zeros(bins, dtype=np.int64), np.linspace(0.0, 1.0, bins + 1)
    else:
        counts, edges = np.histogram(values, bins=bins)
    return Histogram(name, edges.astype(np.float64), counts.astype(np.int64))


def decision_histograms(
    hourly_pnl: Sequence[float],
    da_actions: Sequence[float],
    bid_prices: Sequence[float],
    ask_prices: Sequence[float],
) -> List[Histogram]:
    """Distribution of the agent's hourly P&L and of its DA and BM decisions."""
    return [
        histogram("hourly_pnl", hourly_pnl, PNL_BINS),
        histogram("da_action", da_actions, DA_ACTION_EDGES),
        histogram("bid_price", bid_prices, BM_PRICE_EDGES),
        histogram("ask_price", ask_prices, BM_PRICE_EDGES),
    ]


def cumulative_frame(series: Mapping[str, PnlSeries]) -> pd.DataFrame:
    """Cumulative P&L per strategy on the timestamps every strategy covers."""
    if not series:
        return pd.DataFrame({"timestamp": []})
    shared: Optional[pd.DatetimeIndex] = None
    for s in series.values():
        shared = s.timestamps if shared is None else shared.intersection(s.timestamps)
    if len(shared) == 0:
        raise CoverageGap("Strategies share no timestamps", key=",".join(series))
    shared = shared.sort_values()

    frame = pd.DataFrame({"timestamp": shared.strftime("%Y-%m-%dT%H:%M:%SZ")})
    for label, s in series.items():
        hourly = pd.Series(s.hourly, index=s.timestamps)
        if len(hourly) != len(shared):
            logger.warning(f"{label}: {len(hourly) - len(shared)} hours outside the shared range dropped")
        frame[label] = np.cumsum(hourly.loc[shared].to_numpy())
    return frame


def percent_vs_best(value: float, best: float) -> float:
    """Relative difference to ``best`` in percent; NaN when ``best`` is zero."""
    if best == 0:
        return float("nan")
    return (value - best) / abs(best) * 100.0


def format_percent(percent: float) -> str:
    if not np.isfinite(percent):
        return "n/a"
    return f"{percent:+.0f}%"


@dataclass
class SummaryRow:
    label: str
    total: float
    vs_best: float
    is_benchmark: bool

    @property
    def vs_best_text(self) -> str:
        return format_percent(self.vs_best)


def summary_rows(totals: Mapping[str, float]) -> List[SummaryRow]:
    """Total P&L per strategy and its percent against the best benchmark."""
    benchmarks = {label: v for label, v in totals.items() if label in BenchmarkId._value2member_map_}
    best = max(benchmarks.values()) if benchmarks else float("nan")
    rows = []
    for label, total in totals.items():
        vs_best = percent_vs_best(total, best) if benchmarks else float("nan")
        rows.append(SummaryRow(label, float(total), vs_best, label in benchmarks))
    return rows


def best_benchmark(totals: Mapping[str, float]) -> Optional[str]:
    benchmarks = {label: v for label, v in totals.items() if label in BenchmarkId._value2member_map_}
    if not benchmarks:
        return None
    return max(benchmarks, key=benchmarks.get)


@dataclass
class RunReport:
    """Everything a rendered report shows."""

    fingerprint: str
    series: Dict[str, PnlSeries]
    histograms: List[Histogram] = field(default_factory=list)
    manifest: Dict[str, str] = field(default_factory=dict)
    accuracy: Optional[pd.DataFrame] = None

    @property
    def totals(self) -> Dict[str, float]:
        return {label: s.total for label, s in self.series.items()}

    def summary(self) -> List[SummaryRow]:
        return summary_rows(self.totals)

    def curves(self) -> pd.DataFrame:
        return cumulative_frame(self.series)


REPORT_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>Power arbitrage run {{ fingerprint[:12] }}</title>
    <style>
        body { font-family: sans-serif; margin: 2em; }
        table { border-collapse: collapse; margin-bottom: 2em; }
        th, td { border: 1px solid #ccc; padding: 4px 10px; text-align: right; }
        th:first-child, td:first-child { text-align: left; }
        .positive { color: #1a7f37; }
        .negative { color: #cf222e; }
    </style>
</head>
<body>
    <h1>Power arbitrage run report</h1>
    <p>Fingerprint: <code id="fingerprint">{{ fingerprint }}</code></p>
    {% if best %}<p>Best benchmark: <strong id="best-benchmark">{{ best }}</strong></p>{% endif %}

    <h2>Summary</h2>
    <table id="summary">
        <tr><th>Strategy</th><th>Total P&amp;L (EUR)</th><th>vs best benchmark</th></tr>
        {% for row in summary %}
        <tr data-label="{{ row.label }}">
            <td>{{ row.label }}</td>
            <td>{{ "%.2f"|format(row.total) }}</td>
            <td class="{{ 'positive' if row.vs_best > 0 else 'negative' if row.vs_best < 0 else '' }}">{{ row.vs_best_text }}</td>
        </tr>
        {% endfor %}
    </table>

    <h2>Cumulative P&amp;L</h2>
    <table id="curves">
        <tr><th>Timestamp</th>{% for label in curve_labels %}<th>{{ label }}</th>{% endfor %}</tr>
        {% for row in curve_rows %}
        <tr>{% for cell in row %}<td>{{ cell }}</td>{% endfor %}</tr>
        {% endfor %}
    </table>

    {% for hist in histograms %}
    <h2>Histogram: {{ hist.name }}</h2>
    <table class="histogram" id="hist-{{ hist.name }}">
        <tr><th>From</th><th>To</th><th>Count</th></tr>
        {% for left, right, count in hist.rows() %}
        <tr><td>{{ "%.2f"|format(left) }}</td><td>{{ "%.2f"|format(right) }}</td><td>{{ count }}</td></tr>
        {% endfor %}
    </table>
    {% endfor %}

    {% if accuracy %}
    <h2>Predictor accuracy</h2>
    <table id="accuracy">
        <tr><th>Fold</th><th>Train</th><th>Test</th><th>Accuracy</th></tr>
        {% for row in accuracy %}
        <tr><td>{{ row.fold }}</td><td>{{ row.train_start }} .. {{ row.train_end }}</td>
            <td>{{ row.test_start }} .. {{ row.test_end }}</td><td>{{ "%.3f"|format(row.accuracy) }}</td></tr>
        {% endfor %}
    </table>
    {% endif %}

    {% if manifest %}
    <h2>Manifest</h2>
    <table id="manifest">
        {% for key, value in manifest %}<tr><td>{{ key }}</td><td>{{ value }}</td></tr>{% endfor %}
    </table>
    {% endif %}
</body>
</html>
"""

_jinja = Environment(
    loader=DictLoader({"report.html": REPORT_TEMPLATE}),
    autoescape=select_autoescape(["html"]),
)


class ReportGenerator:
    """Writes a RunReport as data files first, then HTML, then optional PNGs."""

    CURVE_ROW_LIMIT = 400

    def __init__(self, store: RunArtifactStore):
        self.store = store

    def render_html(self, report: RunReport) -> str:
        curves = report.curves()
        labels = [c for c in curves.columns if c != "timestamp"]
        step = max(1, len(curves) // self.CURVE_ROW_LIMIT)
        sampled = curves.iloc[::step]
        curve_rows = [
            [row["timestamp"], *[f"{row[label]:.2f}" for label in labels]]
            for _, row in sampled.iterrows()
        ]
        # Creation time is left out so equal fingerprints render equal files.
        manifest = [(k, v) for k, v in report.manifest.items() if k != "created"]
        accuracy = report.accuracy.to_dict("records") if report.accuracy is not None else []
        return _jinja.get_template("report.html").render(
            fingerprint=report.fingerprint,
            best=best_benchmark(report.totals),
            summary=report.summary(),
            curve_labels=labels,
            curve_rows=curve_rows,
            histograms=report.histograms,
            accuracy=accuracy,
            manifest=manifest,
        )

    def write_data(self, report: RunReport) -> List[Path]:
        paths = [self.store.save_frame("cumulative_pnl.csv", report.curves())]
        for hist in report.histograms:
            paths.append(self.store.save_histogram(hist.name, hist.edges, hist.counts))
        summary = pd.DataFrame(
            {
                "strategy": [r.label for r in report.summary()],
                "total_pnl": [r.total for r in report.summary()],
                "vs_best_percent": [r.vs_best for r in report.summary()],
                "vs_best": [r.vs_best_text for r in report.summary()],
            }
        )
        paths.append(self.store.save_frame("summary.csv", summary))
        return paths

    def write_html(self, report: RunReport, name: str = "report.html") -> Path:
        return self.store.write_text(name, self.render_html(report))

    def write_plots(self, report: RunReport) -> List[Path]:
        """PNG renders; skipped with a warning when matplotlib is unavailable."""
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            logger.warning("matplotlib not installed; skipping PNG renders")
            return []

        paths = []
        curves = report.curves()
        fig, ax = plt.subplots(figsize=(10, 5))
        times = pd.to_datetime(curves["timestamp"])
        for label in curves.columns:
            if label != "timestamp":
                ax.plot(times, curves[label], label=label, linewidth=2 if label == AGENT_LABEL else 1)
        ax.set_ylabel("Cumulative P&L (EUR)")
        ax.legend()
        paths.append(self._save_figure(fig, "cumulative_pnl.png"))
        plt.close(fig)

        for hist in report.histograms:
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.bar(hist.edges[:-1], hist.counts, width=np.diff(hist.edges), align="edge")
            ax.set_title(hist.name)
            paths.append(self._save_figure(fig, f"hist_{hist.name}.png"))
            plt.close(fig)
        return paths

    def _save_figure(self, fig, name: str) -> Path:
        path = self.store.prepare(name)
        fig.savefig(path, dpi=100)
        logger.info(f"Wrote {path}")
        return path

    def generate(self, report: RunReport, plots: bool = True) -> List[Path]:
        paths = self.write_data(report)
        paths.append(self.write_html(report))
        if plots:
            paths.extend(self.write_plots(report))
        return paths
