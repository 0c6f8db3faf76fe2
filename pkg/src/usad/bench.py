"""Inference latency and footprint harness for windowed models."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tensor, no_grad
from .autodiff.nn import count_parameters
from .network import Classifier, assemble_input, estimate_memory

REPORT_FIELDS = ("model", "window_index", "ms", "mean_ms", "median_ms", "p95_ms", "budget_ms",
                 "verdict", "params", "memory_bytes", "reps", "warmup")


@dataclass(frozen=True)
class LatencyBudget:
    """Per-window deadline as a percentage of the segment duration (5% by default)."""

    segment_seconds: float
    percent: float = 5.0

    def __post_init__(self):
        if self.segment_seconds <= 0 or self.percent <= 0:
            raise ValueError("segment length and budget percentage must be positive")

    @property
    def budget_ms(self) -> float:
        return self.segment_seconds * 1000.0 * self.percent / 100.0


@dataclass
class LatencyReport:
    model: str
    times_ms: list
    budget_ms: float
    params: int = 0
    memory_bytes: int = 0
    warmup: int = 10
    extra: dict = field(default_factory=dict)

    @property
    def reps(self) -> int:
        return len(self.times_ms)

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.times_ms))

    @property
    def median_ms(self) -> float:
        return float(np.median(self.times_ms))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.times_ms, 95))

    @property
    def total_ms(self) -> float:
        return float(np.sum(self.times_ms))

    @property
    def passed(self) -> bool:
        return self.p95_ms <= self.budget_ms

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"


def _predictor(model) -> Callable:
    """Turn a classifier into a one-window callable; plain callables pass through."""
    if isinstance(model, Classifier):
        model.eval()
        dtype = model._dtype()

        def run(window):
            x = assemble_input(window.x0, window.f) if hasattr(window, "x0") else window
            with no_grad():
                return model(Tensor(x, dtype=dtype)).data
        return run
    if callable(model):
        return model
    raise TypeError(f"cannot benchmark object of type {type(model).__name__}")


def measure_latency(model, stream, budget: LatencyBudget, reps: int = 100, warmup: int = 10,
                    name: str | None = None, clock: Callable[[], int] = time.perf_counter_ns) -> LatencyReport:
    """Time ``reps`` consecutive single-window inferences, cycling through ``stream``.

    Warmup calls are not recorded. Runs with BLAS limited to one thread.
    """
    stream = list(stream)
    if not stream:
        raise ValueError("measure_latency: empty stream")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    predict = _predictor(model)
    times = []
    with threadpool_limits(limits=1):
        for k in range(warmup):
            predict(stream[k % len(stream)])
        for k in range(reps):
            window = stream[k % len(stream)]
            t0 = clock()
            predict(window)
            times.append((clock() - t0) / 1e6)
    params, memory = footprint(model if isinstance(model, Classifier) else None, stream[0])
    return LatencyReport(name or type(model).__name__, times, budget.budget_ms, params, memory, warmup)


def harness_overhead(stream, reps: int = 100, warmup: int = 10) -> LatencyReport:
    """Latency of a model that does nothing: the cost of the timing loop itself."""
    return measure_latency(lambda w: None, stream, LatencyBudget(1.0), reps, warmup, name="empty")


def footprint(model, example=None) -> tuple[int, int]:
    """``(parameter count, weight bytes + activation bytes of one window)``."""
    if model is None:
        return 0, 0
    if example is None:
        return count_parameters(model), estimate_memory(model)
    x = assemble_input(example.x0, example.f) if hasattr(example, "x0") else np.asarray(example)
    dtype = model.parameters()[0].dtype if model.parameters() else np.float64
    return count_parameters(model), estimate_memory(model, Tensor(x, dtype=dtype))


def report_csv(report: LatencyReport) -> str:
    """Long-format detail rows followed by one summary row, fixed column order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    blank = [""] * (len(REPORT_FIELDS) - 3)
    for i, ms in enumerate(report.times_ms):
        w.writerow([report.model, i, repr(float(ms)), *blank])
    w.writerow([report.model, "summary", repr(report.total_ms), repr(report.mean_ms), repr(report.median_ms),
                repr(report.p95_ms), repr(float(report.budget_ms)), report.verdict, report.params,
                report.memory_bytes, report.reps, report.warmup])
    return buf.getvalue()


def emit_report(report: LatencyReport, path, fmt: str = "csv") -> Path:
    if fmt != "csv":
        raise ValueError(f"unsupported report format {fmt!r}")
    path = Path(path)
    try:
        path.write_text(report_csv(report))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


__all__ = ["LatencyBudget", "LatencyReport", "emit_report", "footprint", "harness_overhead",
           "measure_latency", "report_csv"]
