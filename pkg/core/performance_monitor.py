"""Performance monitoring for pipeline stages."""

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterator, List, Optional

import psutil
from loguru import logger


@dataclass
class StageMetrics:
    """Wall time and resident-memory change of one stage."""
    stage: str
    duration_s: float
    rss_start_mb: float
    rss_end_mb: float
    cpu_percent: float
    threshold_exceeded: bool = False

    @property
    def rss_delta_mb(self) -> float:
        return self.rss_end_mb - self.rss_start_mb


class PerformanceMonitor:
    """Process-level timing and memory tracking; results are logged, never written to artifacts."""

    def __init__(self, time_threshold: Optional[float] = None):
        self.time_threshold = time_threshold
        self.process = psutil.Process()
        self.history: List[StageMetrics] = []

    def _rss_mb(self) -> float:
        return self.process.memory_info().rss / 1024 / 1024

    @contextmanager
    def track(self, stage: str) -> Iterator[Dict[str, Any]]:
        """Measure the enclosed block; the yielded dict is filled in on exit."""
        result: Dict[str, Any] = {}
        rss_start = self._rss_mb()
        self.process.cpu_percent(None)
        start = time.perf_counter()
        try:
            yield result
        finally:
            duration = time.perf_counter() - start
            metrics = StageMetrics(
                stage=stage,
                duration_s=duration,
                rss_start_mb=rss_start,
                rss_end_mb=self._rss_mb(),
                cpu_percent=self.process.cpu_percent(None),
                threshold_exceeded=self.time_threshold is not None and duration > self.time_threshold,
            )
            self.history.append(metrics)
            result.update(asdict(metrics))
            result["rss_delta_mb"] = metrics.rss_delta_mb
            log = logger.warning if metrics.threshold_exceeded else logger.info
            log(
                f"Stage {stage} took {duration:.2f}s",
                extra={"stage": stage, "rss_delta_mb": round(metrics.rss_delta_mb, 2)},
            )

    def summary(self) -> Dict[str, Dict[str, float]]:
        totals: Dict[str, Dict[str, float]] = {}
        for m in self.history:
            entry = totals.setdefault(m.stage, {"count": 0, "total_s": 0.0, "max_s": 0.0})
            entry["count"] += 1
            entry["total_s"] += m.duration_s
            entry["max_s"] = max(entry["max_s"], m.duration_s)
        return totals
