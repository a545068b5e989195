"""Latency, throughput, max-batch and storage benchmarks."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

BYTES_PER_ELEMENT = 8  # float64 activations


@dataclass
class BenchReport:
    model_id: str
    input_dims: tuple[int, ...]
    batch: int
    latency_ms: float
    throughput: float
    repetitions: int
    warmup: int
    timer_resolution_s: float
    max_batch: int | None = None
    storage_original_bytes: int | None = None
    storage_latent_bytes: int | None = None

    @property
    def latency_s(self) -> float:
        return self.latency_ms / 1000.0

    @property
    def tolerance(self) -> float:
        """Bound on |throughput * latency_s - batch| from float rounding."""
        return 1e-9 * self.batch

    def row(self) -> dict:
        d = asdict(self)
        d["input_dims"] = "x".join(map(str, self.input_dims))
        return d


def bench_forward(fn: Callable[[np.ndarray], object], input_dims: Sequence[int], batch: int = 8,
                  repetitions: int = 5, warmup: int = 2, model_id: str = "model",
                  seed: int = 0) -> BenchReport:
    """Median wall time of ``fn`` on a ``(batch, 1, *input_dims)`` input, pinned to one thread."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    x = np.random.default_rng(seed).random((batch, 1) + tuple(input_dims))
    times = []
    with threadpool_limits(limits=1):
        for i in range(warmup + repetitions):
            t0 = time.perf_counter()
            fn(x)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
    lat = statistics.median(times)
    return BenchReport(model_id, tuple(input_dims), batch, lat * 1000.0, batch / lat,
                       repetitions, warmup, time.get_clock_info("perf_counter").resolution)


def bench_max_batch(footprint: Callable[[int], int], budget_bytes: int, limit: int = 2**20) -> int:
    """Largest power of two whose ``footprint(batch)`` fits ``budget_bytes`` (doubling search)."""
    if footprint(1) > budget_bytes:
        raise ValueError(f"a single sample needs {footprint(1)} bytes, budget is {budget_bytes}")
    b = 1
    while b * 2 <= limit and footprint(b * 2) <= budget_bytes:
        b *= 2
    return b


def probe_footprint(backbone, input_dims: Sequence[int]) -> Callable[[int], int]:
    """Activations scale with batch; parameters are a fixed cost."""
    per_sample = backbone.activation_elements(input_dims) * BYTES_PER_ELEMENT
    params = backbone.parameter_count(len(input_dims)) * BYTES_PER_ELEMENT
    return lambda batch: params + batch * per_sample


def write_reports(path, reports: Sequence[BenchReport]) -> None:
    rows = [r.row() for r in reports]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def source_bytes(dims: Sequence[int]) -> int:
    return math.prod(dims) * 4
