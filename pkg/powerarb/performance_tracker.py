"""Wall-clock timing of run phases."""

import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, Iterator, List, Optional


@dataclass
class PhaseTiming:
    """Timing information for one named phase."""

    name: str
    start_time: float
    end_time: Optional[float] = None
    duration: float = 0.0
    items: int = 0


@dataclass
class RunPerformanceStats:
    """Performance statistics of a whole run."""

    total_duration: float = 0.0
    start_timestamp: str = ""
    end_timestamp: str = ""
    phases: List[PhaseTiming] = field(default_factory=list)
    slowest_phases: List[PhaseTiming] = field(default_factory=list)
    recommendations: List[str] = field(default_factory=list)

    def manifest_items(self) -> Dict[str, str]:
        items = {"timing.total_seconds": f"{self.total_duration:.3f}"}
        for phase in self.phases:
            items[f"timing.{phase.name}_seconds"] = f"{phase.duration:.3f}"
        return items


class PerformanceTracker:
    """Tracks phase durations; safe to use from parallel fold workers."""

    def __init__(self):
        self.current_phases: Dict[str, PhaseTiming] = {}
        self.completed_phases: List[PhaseTiming] = []
        self.total_start_time: Optional[float] = None
        self._lock = threading.Lock()

    def start_run(self) -> None:
        self.total_start_time = time.time()

    def start_phase(self, name: str) -> None:
        with self._lock:
            if name in self.current_phases:
                return
            self.current_phases[name] = PhaseTiming(name=name, start_time=time.time())

    def end_phase(self, name: str, items: int = 0) -> None:
        with self._lock:
            phase = self.current_phases.pop(name, None)
            if phase is None:
                return
            phase.end_time = time.time()
            phase.duration = phase.end_time - phase.start_time
            phase.items = items
            self.completed_phases.append(phase)

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        """Time the enclosed block as phase ``name``."""
        self.start_phase(name)
        try:
            yield
        finally:
            self.end_phase(name)

    def get_performance_stats(self) -> RunPerformanceStats:
        if self.total_start_time is None:
            return RunPerformanceStats(phases=list(self.completed_phases))

        total_duration = time.time() - self.total_start_time
        slowest = sorted(self.completed_phases, key=lambda p: p.duration, reverse=True)[:5]
        return RunPerformanceStats(
            total_duration=total_duration,
            start_timestamp=datetime.fromtimestamp(self.total_start_time, timezone.utc).isoformat(),
            end_timestamp=datetime.now(timezone.utc).isoformat(),
            phases=list(self.completed_phases),
            slowest_phases=slowest,
            recommendations=self._generate_recommendations(slowest),
        )

    def _generate_recommendations(self, slowest: List[PhaseTiming]) -> List[str]:
        recommendations = []
        if slowest and slowest[0].duration > 600:
            recommendations.append(
                f"'{slowest[0].name}' took {slowest[0].duration:.0f} seconds. "
                f"Consider fewer agent.episodes or more plan.workers."
            )
        fold_phases = [p for p in self.completed_phases if p.name.startswith("fold")]
        if len(fold_phases) > 1:
            longest = max(p.duration for p in fold_phases)
            if longest > 2 * min(p.duration for p in fold_phases):
                recommendations.append("Fold durations are uneven; check the per-fold hour counts.")
        return recommendations

    def print_live_stats(self) -> None:
        """Print phase timings (for verbose mode)."""
        if not self.completed_phases:
            return

        print("\n=== Phase Timings ===")
        for phase in sorted(self.completed_phases, key=lambda p: p.duration, reverse=True):
            suffix = f" ({phase.items} items)" if phase.items else ""
            print(f"  {phase.name}: {phase.duration:.1f}s{suffix}")

        if self.current_phases:
            print("\nCurrently Running:")
            for name, phase in self.current_phases.items():
                print(f"  {name}: {time.time() - phase.start_time:.1f}s (ongoing)")
        print("=" * 50)
