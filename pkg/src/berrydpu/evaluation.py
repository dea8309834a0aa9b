"""Detection-rate evaluation over a labeled set and per-frame video analysis."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .detector import Detection, detect, iou, load_image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".bmp")


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    # (class, cx, cy, w, h), normalized
    boxes: tuple[tuple[int, float, float, float, float], ...]

    def __post_init__(self):
        for b in self.boxes:
            if not all(0.0 <= v <= 1.0 for v in b[1:]):
                raise LabelError(f"{self.image_id}: box {b} has coordinates outside [0, 1]")


def parse_labels(text: str, image_id: str = "") -> GroundTruth:
    """Darknet label text: one ``class cx cy w h`` per line."""
    boxes = []
    for n, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise LabelError(f"{image_id}:{n}: expected 'class cx cy w h'")
        try:
            boxes.append((int(parts[0]), *(float(p) for p in parts[1:])))
        except ValueError:
            raise LabelError(f"{image_id}:{n}: non-numeric label field") from None
    return GroundTruth(image_id, tuple(boxes))


def format_labels(truth: GroundTruth) -> str:
    return "".join(f"{c} {x:.6f} {y:.6f} {w:.6f} {h:.6f}\n" for c, x, y, w, h in truth.boxes)


@dataclass(frozen=True)
class Sample:
    image_id: str
    image: Any  # path or RGB array
    truth: GroundTruth | None


def list_images(directory: str | Path) -> list[Path]:
    """Image files in natural (numeric-aware) name order."""
    def key(p: Path):
        return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", p.name)]

    return sorted((p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=key)


def load_dataset(image_dir: str | Path, label_dir: str | Path | None = None) -> list[Sample]:
    """Pair images with ``<stem>.txt`` labels; unlabeled images get ``truth=None``."""
    label_dir = Path(label_dir) if label_dir is not None else Path(image_dir)
    samples = []
    for path in list_images(image_dir):
        label = label_dir / f"{path.stem}.txt"
        truth = parse_labels(label.read_text(), path.stem) if label.exists() else None
        samples.append(Sample(path.stem, path, truth))
    return samples


@dataclass(frozen=True)
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    # (detection index, truth index)
    pairs: tuple[tuple[int, int], ...]


def match_detections(dets: Sequence[Detection], truths: Sequence[Sequence[float]],
                     iou_min: float = 0.5) -> MatchResult:
    """Greedy matching by descending confidence; each truth is claimed at most once.

    ``truths`` are (class, cx, cy, w, h). A detection takes the unclaimed
    same-class truth with the highest IoU, provided it reaches ``iou_min``.
    """
    claimed = [False] * len(truths)
    pairs = []
    for k in sorted(range(len(dets)), key=lambda k: (-dets[k].confidence, k)):
        d = dets[k]
        best, best_iou = -1, iou_min
        for t, truth in enumerate(truths):
            if claimed[t] or int(truth[0]) != d.class_id:
                continue
            v = iou(d.box, truth[1:])
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = t, v
        if best >= 0:
            claimed[best] = True
            pairs.append((k, best))
    tp = len(pairs)
    return MatchResult(tp, len(dets) - tp, len(truths) - tp, tuple(pairs))


@dataclass(frozen=True)
class EvalReport:
    images: int
    objects: int
    true_positives: int
    false_positives: int
    false_negatives: int
    per_object_recall: float
    per_image_detection_rate: float
    threshold: float
    iou_min: float = 0.5
    images_with_objects: int = 0
    skipped_images: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def _run_engine(engine, image, threshold: float) -> list[Detection]:
    """Engines with ``heads`` go through the full pipeline; anything else is a callable stub."""
    if hasattr(engine, "heads"):
        dets = detect(image, engine, threshold)
    else:
        dets = engine(image, threshold)
    return [d for d in dets if d.confidence >= threshold]


def _as_image(image):
    return load_image(image) if isinstance(image, (str, Path)) else image


def evaluate(dataset: Iterable[Sample], engine, threshold: float = 0.70, iou_min: float = 0.5,
             missing_labels: str = "fail") -> EvalReport:
    """Aggregate matching over a labeled set.

    ``missing_labels`` is ``"fail"`` (raise) or ``"skip"`` for samples without labels.
    """
    if missing_labels not in ("fail", "skip"):
        raise ValueError("missing_labels must be 'fail' or 'skip'")
    dataset = list(dataset)
    unlabeled = [s.image_id for s in dataset if s.truth is None]
    if unlabeled and missing_labels == "fail":
        # fail before spending any inference time
        raise LabelError(f"no label file for {len(unlabeled)} image(s): {', '.join(unlabeled[:5])}")
    images = objects = tp = fp = fn = with_objects = hit = skipped = 0
    for sample in dataset:
        if sample.truth is None:
            skipped += 1
            continue
        dets = _run_engine(engine, _as_image(sample.image), threshold)
        m = match_detections(dets, sample.truth.boxes, iou_min)
        images += 1
        objects += len(sample.truth.boxes)
        tp += m.true_positives
        fp += m.false_positives
        fn += m.false_negatives
        if sample.truth.boxes:
            with_objects += 1
            hit += m.true_positives > 0
    if images == 0:
        raise ValueError("empty dataset")
    return EvalReport(
        images, objects, tp, fp, fn,
        tp / objects if objects else 0.0,
        hit / with_objects if with_objects else 0.0,
        threshold, iou_min, with_objects, skipped,
    )


# ---------------------------------------------------------------------------
# video


@dataclass(frozen=True)
class Band:
    low: float
    high: float
    include_low: bool = False

    def contains(self, v: float) -> bool:
        above = v >= self.low if self.include_low else v > self.low
        return above and v <= self.high

    def label(self) -> str:
        return f"{'[' if self.include_low else '('}{self.low:.2f}, {self.high:.2f}]"


DEFAULT_BANDS = (Band(0.30, 0.60, include_low=True), Band(0.60, 1.0))


def parse_bands(text: str) -> tuple[Band, ...]:
    """``"0.30-0.60,0.60-1.0"``: first band closed below, the rest open below, all closed above."""
    bands = []
    for i, part in enumerate(p for p in text.split(",") if p.strip()):
        lo, hi = (float(v) for v in part.split("-"))
        bands.append(Band(lo, hi, include_low=(i == 0)))
    return tuple(bands)


def _check_bands(bands: Sequence[Band], threshold: float) -> None:
    ordered = sorted(bands, key=lambda b: b.low)
    for b in ordered:
        if b.low > b.high or b.low < threshold or b.high > 1.0:
            raise ValueError(f"band {b.label()} must lie within [{threshold}, 1]")
    for a, b in zip(ordered, ordered[1:]):
        if b.low < a.high or (b.low == a.high and b.include_low):
            raise ValueError(f"bands {a.label()} and {b.label()} overlap")


@dataclass(frozen=True)
class VideoReport:
    total_frames: int
    frames_with_detections: int
    band_counts: dict[str, int]
    detect_threshold: float
    frames_without_detections: int = 0
    out_of_band_frames: int = 0
    unreadable_frames: int = 0
    max_confidences: list[float | None] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return asdict(self)


def analyze_video(frames: Iterable[Any], engine, detect_threshold: float = 0.30,
                  bands: Sequence[Band] = DEFAULT_BANDS) -> VideoReport:
    """Bucket frames by their strongest detection. Unreadable frames are counted, not fatal."""
    _check_bands(bands, detect_threshold)
    counts = {b.label(): 0 for b in bands}
    total = with_dets = unreadable = out_of_band = 0
    maxima: list[float | None] = []
    for frame in frames:
        total += 1
        try:
            image = _as_image(frame)
        except (OSError, ValueError):
            unreadable += 1
            maxima.append(None)
            continue
        dets = _run_engine(engine, image, detect_threshold)
        top = max((d.confidence for d in dets), default=0.0)
        maxima.append(top)
        if not dets:
            continue
        with_dets += 1
        for b in bands:
            if b.contains(top):
                counts[b.label()] += 1
                break
        else:
            out_of_band += 1
    return VideoReport(total, with_dets, counts, detect_threshold,
                       total - with_dets - unreadable, out_of_band, unreadable, maxima)


def format_eval_table(report: EvalReport) -> str:
    rows = [
        ("images", report.images),
        ("objects", report.objects),
        ("true positives", report.true_positives),
        ("false positives", report.false_positives),
        ("false negatives", report.false_negatives),
        ("per-object recall", f"{100 * report.per_object_recall:.1f}%"),
        ("per-image detection rate", f"{100 * report.per_image_detection_rate:.1f}%"),
        ("threshold", f"{report.threshold:.2f}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def format_video_table(report: VideoReport) -> str:
    rows = [
        ("total frames", report.total_frames),
        ("frames with detections", report.frames_with_detections),
        *((f"max confidence in {k}", v) for k, v in report.band_counts.items()),
        ("frames without detections", report.frames_without_detections),
        ("unreadable frames", report.unreadable_frames),
        ("detection threshold", f"{report.detect_threshold:.2f}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"
