"""Tests for report data files, summary rows and the HTML render."""

import sys

import numpy as np
import pandas as pd
import pytest
from bs4 import BeautifulSoup

from powerarb.data_storage import RunArtifactStore
from powerarb.errors import CoverageGap
from powerarb.policies import PnlSeries
from powerarb.reporting import (
    DA_ACTION_EDGES,
    ReportGenerator,
    RunReport,
    best_benchmark,
    cumulative_frame,
    decision_histograms,
    format_percent,
    histogram,
    percent_vs_best,
    summary_rows,
)


def hourly_series(label: str, values, start: str = "2017-01-01") -> PnlSeries:
    return PnlSeries(
        label,
        pd.date_range(start, periods=len(values), freq="h", tz="UTC"),
        np.asarray(values, dtype=np.float64),
    )


@pytest.fixture
def report() -> RunReport:
    series = {
        "agent": hourly_series("agent", [100.0, 48.0]),
        "P1": hourly_series("P1", [50.0, 50.0]),
        "P2": hourly_series("P2", [-10.0, 20.0]),
    }
    return RunReport(
        fingerprint="ab" * 32,
        series=series,
        histograms=decision_histograms([100.0, 48.0], [150.0, 210.0], [-90.0, -300.0], [90.0, 80.0]),
        manifest={"created": "2017-01-01T00:00:00+00:00", "seed": "7"},
    )


class TestSummary:
    """Percent against the best benchmark."""

    def test_percent_formatting(self):
        assert format_percent(percent_vs_best(148.0, 100.0)) == "+48%"
        assert format_percent(percent_vs_best(50.0, 100.0)) == "-50%"
        assert format_percent(percent_vs_best(-50.0, -100.0)) == "+50%"

    def test_zero_best_benchmark(self):
        assert np.isnan(percent_vs_best(10.0, 0.0))
        assert format_percent(float("nan")) == "n/a"

    def test_rows(self):
        rows = summary_rows({"agent": 148.0, "P1": 100.0, "P2": 20.0})

        assert [r.label for r in rows] == ["agent", "P1", "P2"]
        assert rows[0].vs_best_text == "+48%"
        assert rows[1].vs_best == 0.0
        assert not rows[0].is_benchmark and rows[1].is_benchmark

    def test_no_benchmarks(self):
        (row,) = summary_rows({"agent": 1.0})

        assert row.vs_best_text == "n/a"
        assert best_benchmark({"agent": 1.0}) is None

    def test_best_benchmark(self):
        assert best_benchmark({"agent": 999.0, "P1": 1.0, "P4": 3.0}) == "P4"


class TestHistogram:
    def test_fixed_edges_clip_outliers(self):
        hist = histogram("da_action", [0.0, 110.0, 500.0], DA_ACTION_EDGES)

        assert hist.total == 3
        assert hist.counts[0] == 1
        assert hist.counts[-1] == 1
        assert len(hist.edges) == len(hist.counts) + 1

    def test_empty_values_with_bin_count(self):
        hist = histogram("hourly_pnl", [], 4)

        assert hist.total == 0
        assert list(hist.edges) == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_rows(self):
        hist = histogram("x", [0.5, 1.5], np.array([0.0, 1.0, 2.0]))

        assert hist.rows() == [(0.0, 1.0, 1), (1.0, 2.0, 1)]

    def test_decision_histograms(self):
        names = [h.name for h in decision_histograms([1.0], [20.0], [0.0], [0.0])]

        assert names == ["hourly_pnl", "da_action", "bid_price", "ask_price"]


class TestCumulativeFrame:
    def test_shared_timestamps(self):
        frame = cumulative_frame(
            {"agent": hourly_series("agent", [1.0, 2.0, 3.0]), "P1": hourly_series("P1", [5.0, 5.0])}
        )

        assert list(frame.columns) == ["timestamp", "agent", "P1"]
        assert list(frame["agent"]) == [1.0, 3.0]
        assert list(frame["P1"]) == [5.0, 10.0]
        assert frame["timestamp"].iloc[0] == "2017-01-01T00:00:00Z"

    def test_disjoint_series(self):
        with pytest.raises(CoverageGap):
            cumulative_frame(
                {"agent": hourly_series("agent", [1.0]), "P1": hourly_series("P1", [1.0], start="2018-01-01")}
            )


class TestReportGenerator:
    """Data files first, then HTML, then optional PNGs."""

    def test_html_shows_fingerprint_and_summary(self, report, run_dir):
        html = ReportGenerator(RunArtifactStore(str(run_dir))).render_html(report)
        soup = BeautifulSoup(html, "html.parser")

        assert soup.find(id="fingerprint").text == report.fingerprint
        assert soup.find(id="best-benchmark").text == "P1"
        agent_row = soup.find("tr", attrs={"data-label": "agent"})
        cells = [td.text for td in agent_row.find_all("td")]
        assert cells == ["agent", "148.00", "+48%"]
        assert soup.find(id="hist-da_action") is not None

    def test_render_is_deterministic_and_skips_creation_time(self, report, run_dir):
        generator = ReportGenerator(RunArtifactStore(str(run_dir)))

        first = generator.render_html(report)
        report.manifest["created"] = "2020-05-05T00:00:00+00:00"
        second = generator.render_html(report)

        assert first == second
        assert "2017-01-01T00:00:00+00:00" not in first

    def test_generate_without_plots(self, report, run_dir):
        paths = ReportGenerator(RunArtifactStore(str(run_dir))).generate(report, plots=False)

        names = sorted(p.name for p in paths)
        assert names == sorted(
            [
                "cumulative_pnl.csv",
                "hist_hourly_pnl.csv",
                "hist_da_action.csv",
                "hist_bid_price.csv",
                "hist_ask_price.csv",
                "summary.csv",
                "report.html",
            ]
        )
        summary = pd.read_csv(run_dir / "summary.csv")
        assert list(summary["strategy"]) == ["agent", "P1", "P2"]
        assert list(summary["vs_best"]) == ["+48%", "+0%", "-90%"]

    def test_plots_skipped_without_matplotlib(self, report, run_dir, mocker):
        mocker.patch.dict(sys.modules, {"matplotlib": None})

        assert ReportGenerator(RunArtifactStore(str(run_dir))).write_plots(report) == []
