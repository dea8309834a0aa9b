"""Frame-rate and latency measurement for end-to-end detection pipelines.

Timings cover the user-visible frame: preprocessing, inference and
decoding. Comparison is float host path against the emulated int8 DPU path.
"""

from __future__ import annotations

import os
import platform
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

TIMING_SCOPE = "end-to-end per frame: letterbox + inference + decode + NMS"


@dataclass(frozen=True)
class PipelineStats:
    name: str
    frames: int
    wall_time_s: float
    fps: float
    latency_mean_ms: float
    latency_p50_ms: float
    latency_p99_ms: float
    mode: str = "sequential"
    latencies_ms: list[float] = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class BenchReport:
    pipelines: list[PipelineStats]
    speedup_ratio: float | None
    host: str
    timing_scope: str = TIMING_SCOPE

    def to_json(self, include_samples: bool = False) -> dict:
        out = asdict(self)
        if not include_samples:
            for p in out["pipelines"]:
                p.pop("latencies_ms")
        return out

    def stats(self, name: str) -> PipelineStats:
        return next(p for p in self.pipelines if p.name == name)


def host_description() -> str:
    return (f"{platform.system()} {platform.machine()}, {os.cpu_count()} cpu, "
            f"python {platform.python_version()}, numpy {np.__version__}")


def measure_pipeline(pipeline: Callable[[Any], Any], images: Sequence[Any], warmup_iterations: int = 3,
                     measured_iterations: int = 10, name: str = "pipeline",
                     mode: str = "sequential") -> PipelineStats:
    """Time ``measured_iterations`` passes over ``images`` after ``warmup_iterations`` untimed passes.

    ``mode="pipelined"`` keeps two frames in flight on a thread pool; its
    latencies are submit-to-completion and are not comparable to sequential ones.
    """
    if not images:
        raise ValueError("no images to benchmark")
    if measured_iterations < 1:
        raise ValueError("measured_iterations must be >= 1")
    if mode not in ("sequential", "pipelined"):
        raise ValueError(f"unknown mode {mode!r}")
    for _ in range(warmup_iterations):
        for image in images:
            pipeline(image)

    frames = [image for _ in range(measured_iterations) for image in images]
    latencies = []
    start = time.perf_counter()
    if mode == "sequential":
        for image in frames:
            t0 = time.perf_counter()
            pipeline(image)
            latencies.append(time.perf_counter() - t0)
    else:
        def timed(image, submitted):
            pipeline(image)
            return time.perf_counter() - submitted

        in_flight: deque = deque()
        with ThreadPoolExecutor(max_workers=2) as pool:
            for image in frames:
                if len(in_flight) == 2:
                    latencies.append(in_flight.popleft().result())
                in_flight.append(pool.submit(timed, image, time.perf_counter()))
            latencies += [f.result() for f in in_flight]
    wall = time.perf_counter() - start

    ms = np.array(latencies) * 1e3
    return PipelineStats(
        name, len(frames), wall, len(frames) / wall,
        float(ms.mean()), float(np.percentile(ms, 50)), float(np.percentile(ms, 99)),
        mode, [float(v) for v in ms],
    )


def measure(pipelines: Mapping[str, Callable[[Any], Any]], images: Sequence[Any], warmup_iterations: int = 3,
            measured_iterations: int = 10, mode: str = "sequential") -> BenchReport:
    """Benchmark each named pipeline; ``speedup_ratio`` is FPS(quant) / FPS(float) when both exist."""
    stats = [measure_pipeline(fn, images, warmup_iterations, measured_iterations, name, mode)
             for name, fn in pipelines.items()]
    by_name = {s.name: s for s in stats}
    ratio = by_name["quant"].fps / by_name["float"].fps if {"quant", "float"} <= by_name.keys() else None
    return BenchReport(stats, ratio, host_description())


def format_table(report: BenchReport) -> str:
    """Columns follow the usual pipeline / FPS / device layout, plus latency percentiles."""
    header = ("Pipeline", "FPS", "mean ms", "p50 ms", "p99 ms", "Frames", "Device")
    rows = [(p.name + ("" if p.mode == "sequential" else f" ({p.mode})"), f"{p.fps:.2f}",
             f"{p.latency_mean_ms:.1f}", f"{p.latency_p50_ms:.1f}", f"{p.latency_p99_ms:.1f}",
             str(p.frames), report.host) for p in report.pipelines]
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in rows]
    if report.speedup_ratio is not None:
        lines.append(f"speedup quant/float: {report.speedup_ratio:.2f}x")
    lines.append(f"timing: {report.timing_scope}")
    return "\n".join(lines) + "\n"
