"""Run artifact storage: every file a command reads or writes goes through here."""

import json
import logging
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dateutil.parser import isoparse

from .ddpg import DdpgAgent, EvaluationResult, TrainingCurve
from .errors import MissingArtifact
from .market_data import FeatureScaler, MarketTable, load_market_table, save_market_table
from .performance_tracker import RunPerformanceStats
from .policies import PnlSeries
from .state_predictor import StatePredictor

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.txt"
PREDICTOR_FILE = "predictor.txt"
SCALER_FILE = "scaler.txt"


class RunArtifactStore:
    """Loads and saves the artifacts of one run directory."""

    def __init__(self, output_dir: str = ".generated/run"):
        self.output_dir = Path(output_dir)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def require(self, name: str) -> Path:
        path = self.path(name)
        if not path.exists():
            raise MissingArtifact(f"Required artifact {path} not found", key=str(path))
        return path

    def prepare(self, name: str) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return self.path(name)

    def write_text(self, name: str, text: str) -> Path:
        path = self.prepare(name)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        logger.info(f"Wrote {path}")
        return path

    def _read_text(self, name: str) -> str:
        with open(self.require(name), "r", encoding="utf-8") as f:
            return f.read()

    def save_frame(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.prepare(name)
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        logger.info(f"Wrote {path} ({len(frame)} rows)")
        return path

    def load_frame(self, name: str) -> pd.DataFrame:
        return pd.read_csv(self.require(name))

    # Market data

    def save_market(self, table: MarketTable, name: str = "market.csv") -> Path:
        path = self.prepare(name)
        save_market_table(table, str(path))
        return path

    def load_market(self, name: str = "market.csv") -> MarketTable:
        return load_market_table(str(self.require(name)))

    # Fitted artifacts

    def save_predictor(self, predictor: StatePredictor, name: str = PREDICTOR_FILE) -> Path:
        return self.write_text(name, predictor.to_key_value_text())

    def load_predictor(self, name: str = PREDICTOR_FILE) -> StatePredictor:
        return StatePredictor.from_key_value_text(self._read_text(name))

    def save_scaler(self, scaler: FeatureScaler, name: str = SCALER_FILE) -> Path:
        return self.write_text(name, scaler.to_key_value_text())

    def load_scaler(self, name: str = SCALER_FILE) -> FeatureScaler:
        return FeatureScaler.from_key_value_text(self._read_text(name))

    def save_agent(self, agent: DdpgAgent, prefix: str = "") -> Path:
        return self.write_text(f"{prefix}agent_{agent.name}.ckpt", agent.to_text())

    def load_agent(self, name: str, prefix: str = "", config=None) -> DdpgAgent:
        return DdpgAgent.from_text(name, self._read_text(f"{prefix}agent_{name}.ckpt"), config)

    # Results

    def save_pnl(self, series: PnlSeries) -> Path:
        return self.save_frame(f"pnl_{series.label}.csv", series.to_frame())

    def load_pnl(self, label: str) -> PnlSeries:
        return PnlSeries.from_frame(label, self.load_frame(f"pnl_{label}.csv"))

    def pnl_labels(self) -> List[str]:
        if not self.output_dir.exists():
            return []
        return sorted(p.stem[len("pnl_") :] for p in self.output_dir.glob("pnl_*.csv"))

    def save_decisions(self, evaluation: EvaluationResult, prefix: str = "") -> List[Path]:
        """DA decisions per hour and BM prices per quarter of an evaluation."""
        hours = sorted(evaluation.da_actions)
        da = pd.DataFrame(
            {
                "timestamp": evaluation.series.timestamps.strftime("%Y-%m-%dT%H:%M:%SZ"),
                "hour_index": np.array(hours, dtype=np.int64),
                "s_da": [evaluation.da_actions[h] for h in hours],
            }
        )
        bm = pd.DataFrame({"bid_price": evaluation.bid_prices, "ask_price": evaluation.ask_prices})
        return [
            self.save_frame(f"{prefix}decisions_da.csv", da),
            self.save_frame(f"{prefix}decisions_bm.csv", bm),
        ]

    def load_decisions(self, prefix: str = "") -> Tuple[pd.DataFrame, pd.DataFrame]:
        return (
            self.load_frame(f"{prefix}decisions_da.csv"),
            self.load_frame(f"{prefix}decisions_bm.csv"),
        )

    def save_curve(self, curve: TrainingCurve, name: str = "training_curve.csv") -> Path:
        return self.save_frame(name, curve.to_frame())

    def save_trace(self, rows: Sequence[Dict[str, Any]], name: str) -> Path:
        return self.save_frame(f"trace_{name}.csv", pd.DataFrame(list(rows)))

    def save_histogram(self, name: str, edges: np.ndarray, counts: np.ndarray) -> Path:
        frame = pd.DataFrame(
            {"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts.astype(np.int64)}
        )
        return self.save_frame(f"hist_{name}.csv", frame)

    def load_histogram(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        frame = self.load_frame(f"hist_{name}.csv")
        edges = np.append(frame["bin_left"].to_numpy(), frame["bin_right"].to_numpy()[-1:])
        return edges, frame["count"].to_numpy()

    # Manifest

    def write_manifest(self, items: Iterable[Tuple[str, Any]]) -> Path:
        """Key-value manifest; a creation timestamp is added first."""
        lines = [f"created = {datetime.now(timezone.utc).isoformat()}"]
        lines.extend(f"{key} = {_manifest_value(value)}" for key, value in items)
        return self.write_text(MANIFEST_FILE, "\n".join(lines) + "\n")

    def read_manifest(self) -> Dict[str, str]:
        manifest = {}
        for line in self._read_text(MANIFEST_FILE).splitlines():
            key, sep, value = line.partition(" = ")
            if sep:
                manifest[key.strip()] = value.strip()
        return manifest

    def save_performance_stats(self, stats: RunPerformanceStats) -> Path:
        return self.write_text("performance.json", json.dumps(asdict(stats), indent=2))

    def get_run_age(self) -> str:
        """Age of the run described by the manifest."""
        if not self.exists(MANIFEST_FILE):
            return "No manifest found"
        try:
            created = isoparse(self.read_manifest()["created"])
        except (KeyError, ValueError):
            return "Unknown age"
        age = datetime.now(timezone.utc) - created
        if age.days > 0:
            return f"{age.days} days old"
        if age.seconds > 3600:
            return f"{age.seconds // 3600} hours old"
        return f"{age.seconds // 60} minutes old"


def _manifest_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_manifest_value(v) for v in value)
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
