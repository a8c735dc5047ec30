"""
Stage timing for mfsmp pipelines.

Simulation, adjoint solves, checks and oracle runs record their wall-clock
duration here. Timings are diagnostic only and never enter result files
that are expected to be byte-identical across runs.
"""

import csv
import io
import json
import logging
import statistics
import threading
import time
from collections import defaultdict, deque
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Optional

from .settings import get_setting

logger = logging.getLogger(__name__)


@dataclass
class PerformanceMetric:
    """Individual timing record."""

    component: str
    operation: str
    duration_ms: float
    success: bool
    metadata: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ComponentStats:
    """Aggregated statistics for a component."""

    total_calls: int = 0
    successful_calls: int = 0
    failed_calls: int = 0
    avg_duration_ms: float = 0.0
    min_duration_ms: float = float("inf")
    max_duration_ms: float = 0.0
    total_duration_ms: float = 0.0
    p95_duration_ms: float = 0.0


class PerformanceMonitor:
    """
    Collects stage timings per component.

    Features:
    - Thread-safe metric collection
    - Per-component statistics
    - Slow-stage warnings
    - JSON and CSV export
    """

    def __init__(self, max_metrics_per_component: int = 10000):
        self.max_metrics_per_component = max_metrics_per_component
        self._lock = threading.RLock()
        self._metrics: Dict[str, deque] = defaultdict(
            lambda: deque(maxlen=max_metrics_per_component)
        )
        self._component_stats: Dict[str, ComponentStats] = defaultdict(ComponentStats)

    def record_metric(
        self,
        component: str,
        operation: str,
        duration_ms: float,
        success: bool = True,
        metadata: Optional[Dict[str, Any]] = None,
    ):
        """
        Record a timing.

        Args:
            component: Component name (e.g., 'forward_sim', 'adjoint')
            operation: Operation name (e.g., 'simulate', 'solve_adjoint_lsmc')
            duration_ms: Duration in milliseconds
            success: Whether the operation completed without raising
            metadata: Additional metadata
        """
        metric = PerformanceMetric(
            component=component,
            operation=operation,
            duration_ms=duration_ms,
            success=success,
            metadata=metadata or {},
        )

        with self._lock:
            self._metrics[component].append(metric)
            self._update_component_stats(component)

        threshold = get_setting("slow_stage_ms")
        if duration_ms > threshold:
            logger.warning(
                f"{component}.{operation} took {duration_ms:.0f} ms "
                f"(slow-stage threshold {threshold:.0f} ms)"
            )

    def _update_component_stats(self, component: str):
        """Update aggregated statistics for a component."""
        metrics = list(self._metrics[component])
        if not metrics:
            return

        stats = self._component_stats[component]
        stats.total_calls = len(metrics)
        stats.successful_calls = sum(1 for m in metrics if m.success)
        stats.failed_calls = stats.total_calls - stats.successful_calls

        durations = [m.duration_ms for m in metrics]
        stats.avg_duration_ms = statistics.mean(durations)
        stats.min_duration_ms = min(durations)
        stats.max_duration_ms = max(durations)
        stats.total_duration_ms = sum(durations)

        if len(durations) >= 20:
            sorted_durations = sorted(durations)
            n = len(sorted_durations)
            stats.p95_duration_ms = sorted_durations[int(0.95 * (n - 1))]

    def get_component_stats(self, component: str) -> Optional[ComponentStats]:
        """Statistics for one component, or None if nothing was recorded."""
        with self._lock:
            return self._component_stats.get(component)

    def get_all_stats(self) -> Dict[str, ComponentStats]:
        with self._lock:
            return dict(self._component_stats)

    def export_metrics(
        self,
        component: Optional[str] = None,
        format: str = "json",
        include_raw_metrics: bool = False,
    ) -> str:
        """
        Export timing statistics.

        Args:
            component: Specific component to export (None for all)
            format: Export format ('json', 'csv')
            include_raw_metrics: Whether to include every recorded timing

        Returns:
            Exported data as string
        """
        with self._lock:
            if component:
                components = (
                    {component: self._component_stats[component]}
                    if component in self._component_stats
                    else {}
                )
            else:
                components = dict(self._component_stats)

            if format == "json":
                export_data: Dict[str, Any] = {
                    "component_stats": {
                        comp: asdict(stats) for comp, stats in sorted(components.items())
                    }
                }
                export_data["slowest_stages"] = self.slowest_stages(components)
                if include_raw_metrics:
                    export_data["raw_metrics"] = {
                        comp: [asdict(m) for m in self._metrics[comp]]
                        for comp in sorted(components)
                    }
                return json.dumps(export_data, indent=2, default=str)
            elif format == "csv":
                output = io.StringIO()
                writer = csv.writer(output, lineterminator="\n")
                writer.writerow(
                    [
                        "component",
                        "total_calls",
                        "failed_calls",
                        "avg_duration_ms",
                        "max_duration_ms",
                        "total_duration_ms",
                    ]
                )
                for comp, stats in sorted(components.items()):
                    writer.writerow(
                        [
                            comp,
                            stats.total_calls,
                            stats.failed_calls,
                            stats.avg_duration_ms,
                            stats.max_duration_ms,
                            stats.total_duration_ms,
                        ]
                    )
                return output.getvalue()
            else:
                raise ValueError(f"Unsupported format: {format}")

    @staticmethod
    def slowest_stages(components: Dict[str, ComponentStats], limit: int = 5) -> List[Dict[str, Any]]:
        """Components ordered by total time spent."""
        ranked = sorted(components.items(), key=lambda item: (-item[1].total_duration_ms, item[0]))
        return [
            {"component": comp, "total_duration_ms": s.total_duration_ms, "calls": s.total_calls}
            for comp, s in ranked[:limit]
        ]

    def reset_metrics(self, component: Optional[str] = None):
        """Reset metrics for a component or all components."""
        with self._lock:
            if component:
                self._metrics.pop(component, None)
                self._component_stats.pop(component, None)
            else:
                self._metrics.clear()
                self._component_stats.clear()


# Global performance monitor instance
_performance_monitor = PerformanceMonitor()


@contextmanager
def timed(component: str, operation: str, **metadata: Any) -> Iterator[None]:
    """Record the duration of the enclosed block."""
    start = time.perf_counter()
    success = True
    try:
        yield
    except Exception:
        success = False
        raise
    finally:
        duration_ms = (time.perf_counter() - start) * 1000.0
        _performance_monitor.record_metric(component, operation, duration_ms, success, metadata)


def get_stats(component: Optional[str] = None) -> Dict[str, Any]:
    """Get timing statistics."""
    if component:
        stats = _performance_monitor.get_component_stats(component)
        return asdict(stats) if stats else {}
    return {comp: asdict(stats) for comp, stats in _performance_monitor.get_all_stats().items()}


def export_performance_data(
    component: Optional[str] = None, format: str = "json", include_raw_metrics: bool = False
) -> str:
    """Export timing data."""
    return _performance_monitor.export_metrics(component, format, include_raw_metrics)


def reset_performance_data(component: Optional[str] = None):
    """Reset timing data."""
    _performance_monitor.reset_metrics(component)
