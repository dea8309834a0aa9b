"""Figures written next to the JSON/table reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchReport  # noqa: E402
from .evaluation import EvalReport, VideoReport  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_bench(report: BenchReport, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, (ax_fps, ax_lat) = plt.subplots(1, 2, figsize=(7, 3))
        names = [p.name for p in report.pipelines]
        ax_fps.bar(names, [p.fps for p in report.pipelines], color=["#888888", "#c0392b"][: len(names)])
        ax_fps.set_ylabel("frames per second")
        title = "throughput"
        if report.speedup_ratio is not None:
            title += f" (quant/float {report.speedup_ratio:.2f}x)"
        ax_fps.set_title(title)
        samples = [p.latencies_ms or [p.latency_mean_ms] for p in report.pipelines]
        ax_lat.boxplot(samples, showfliers=False)
        ax_lat.set_xticks(range(1, len(names) + 1), names)
        ax_lat.set_ylabel("latency (ms)")
        ax_lat.set_title("per-frame latency")
        return _save(fig, path)


def plot_video(report: VideoReport, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, (ax_bands, ax_trace) = plt.subplots(1, 2, figsize=(8, 3), gridspec_kw={"width_ratios": [1, 2]})
        labels = ["none", *report.band_counts.keys()]
        counts = [report.frames_without_detections, *report.band_counts.values()]
        ax_bands.bar(labels, counts, color="#c0392b")
        ax_bands.set_ylabel("frames")
        ax_bands.set_title(f"{report.frames_with_detections}/{report.total_frames} frames with detections")
        trace = [c if c is not None else 0.0 for c in report.max_confidences]
        ax_trace.plot(range(len(trace)), trace, lw=0.8, color="#333333")
        ax_trace.axhline(report.detect_threshold, ls="--", lw=0.8, color="#888888")
        ax_trace.set_xlabel("frame")
        ax_trace.set_ylabel("max confidence")
        ax_trace.set_ylim(0, 1)
        return _save(fig, path)


def plot_eval(report: EvalReport, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, (ax_counts, ax_rates) = plt.subplots(1, 2, figsize=(7, 3))
        ax_counts.bar(["TP", "FP", "FN"], [report.true_positives, report.false_positives, report.false_negatives],
                      color=["#27ae60", "#c0392b", "#888888"])
        ax_counts.set_title(f"{report.objects} objects in {report.images} images")
        ax_rates.bar(["per object", "per image"], [report.per_object_recall, report.per_image_detection_rate],
                     color="#2c3e50")
        ax_rates.set_ylim(0, 1)
        ax_rates.set_title(f"detection rate at confidence >= {report.threshold:.2f}")
        return _save(fig, path)
