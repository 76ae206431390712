"""
Run metrics.

Stage timings and solver/ensemble counters for one or more CLI invocations.
Everything is held in memory and exported to JSON on request (--metrics).
Timings depend on the wall clock, so they never enter the run manifest.
"""

import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from threading import Lock
from typing import Any, Dict, Iterator, List, Optional

from .logger import get_logger

logger = get_logger(__name__)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class StageTiming:
    """Wall-clock duration of one pipeline stage."""

    name: str
    duration_ms: float
    finished_at: str
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "duration_ms": self.duration_ms, **self.metadata}


@dataclass
class Counter:
    name: str
    count: int = 0
    last_updated: Optional[str] = None


@dataclass
class PipelineRun:
    """Metrics for a single CLI invocation."""

    run_id: str
    started_at: str
    completed_at: Optional[str] = None
    success: Optional[bool] = None
    stages: List[StageTiming] = field(default_factory=list)
    total_duration_ms: float = 0.0
    errors: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "started_at": self.started_at,
            "completed_at": self.completed_at,
            "success": self.success,
            "duration_ms": self.total_duration_ms,
            "stages": [s.to_dict() for s in self.stages],
            "errors": list(self.errors),
        }


class MetricsCollector:
    """
    Lock-guarded collector shared by the CLI and the library.

    Stages: generate, solve, stage2, ensemble (one per noise spec), report.
    Counters: bnb_nodes, lp_iterations, feasible_replicates.
    """

    def __init__(self, export_path: Optional[Path] = None):
        self._lock = Lock()
        self._export_path = export_path
        self._runs: List[PipelineRun] = []
        self._current: Optional[PipelineRun] = None
        self._current_start = 0.0
        self._counters: Dict[str, Counter] = {}

    # -------------------------------------------------------------------------
    # Runs
    # -------------------------------------------------------------------------

    def start_run(self, run_id: str) -> None:
        with self._lock:
            self._current = PipelineRun(run_id=run_id, started_at=_utc_now())
            self._current_start = time.perf_counter()
        logger.debug("Run started", run_id=run_id)

    def end_run(self, success: bool = True) -> Optional[PipelineRun]:
        """Close the current run; None when no run is open."""
        with self._lock:
            run, self._current = self._current, None
            if run is None:
                return None
            run.completed_at = _utc_now()
            run.success = success
            run.total_duration_ms = (time.perf_counter() - self._current_start) * 1000
            self._runs.append(run)

        logger.info(
            "Run completed",
            run_id=run.run_id,
            success=success,
            stages=len(run.stages),
            duration_ms=round(run.total_duration_ms, 2),
        )
        return run

    def record_error(self, error_type: str, message: str) -> None:
        with self._lock:
            if self._current is not None:
                self._current.errors.append(
                    {"type": error_type, "message": message, "timestamp": _utc_now()}
                )

    @contextmanager
    def track_stage(self, name: str, **metadata: Any) -> Iterator[None]:
        """
        Time one pipeline stage; the timing is kept even when the stage raises.

        Usage:
            with metrics.track_stage("solve", variables=problem.n_vars):
                result = solve_milp(problem, cfg)
        """
        began = time.perf_counter()
        try:
            yield
        finally:
            timing = StageTiming(
                name=name,
                duration_ms=(time.perf_counter() - began) * 1000,
                finished_at=_utc_now(),
                metadata=dict(metadata),
            )
            with self._lock:
                if self._current is not None:
                    self._current.stages.append(timing)
            logger.debug("Stage finished", stage=name, duration_ms=round(timing.duration_ms, 2))

    # -------------------------------------------------------------------------
    # Counters
    # -------------------------------------------------------------------------

    def increment(self, name: str, amount: int = 1) -> None:
        with self._lock:
            counter = self._counters.setdefault(name, Counter(name=name))
            counter.count += int(amount)
            counter.last_updated = _utc_now()

    def get_counter(self, name: str) -> int:
        with self._lock:
            counter = self._counters.get(name)
        return 0 if counter is None else counter.count

    # -------------------------------------------------------------------------
    # Summaries
    # -------------------------------------------------------------------------

    def get_stage_stats(self) -> Dict[str, Dict[str, float]]:
        """Count, total and mean duration per stage name, open run included."""
        durations: Dict[str, List[float]] = {}
        with self._lock:
            runs = self._runs + ([self._current] if self._current else [])
            for run in runs:
                for stage in run.stages:
                    durations.setdefault(stage.name, []).append(stage.duration_ms)

        return {
            name: {
                "count": len(values),
                "total_ms": round(sum(values), 2),
                "mean_ms": round(sum(values) / len(values), 2),
            }
            for name, values in durations.items()
        }

    def export_metrics(self, path: Optional[Path] = None) -> Dict[str, Any]:
        """Snapshot of every run, stage and counter; written as JSON when a path is known."""
        stages = self.get_stage_stats()
        with self._lock:
            snapshot = {
                "exported_at": _utc_now(),
                "runs": [run.to_dict() for run in self._runs],
                "stages": stages,
                "counters": {
                    name: {k: v for k, v in asdict(c).items() if k != "name"}
                    for name, c in self._counters.items()
                },
            }

        target = path or self._export_path
        if target is not None:
            target = Path(target)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(json.dumps(snapshot, indent=2) + "\n", encoding="utf-8")
            logger.info("Metrics exported", path=str(target))
        return snapshot

    def reset(self) -> None:
        with self._lock:
            self._runs.clear()
            self._current = None
            self._counters.clear()


# Shared by the CLI commands
metrics = MetricsCollector()
