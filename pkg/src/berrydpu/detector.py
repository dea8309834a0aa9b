"""Host-side detection: letterbox preprocessing, YOLO head decoding, NMS.

Boxes are (cx, cy, w, h). Decoded boxes are normalized to the letterboxed
network input; :func:`detect` maps them back to the original image and
normalizes by its size.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import compiler, quantizer
from .model_ir import NetworkGraph, WeightStore, fold_batchnorm
from .tensor_engine import ShapeError, forward

PAD_VALUE = 0.5
DEFAULT_CONF = 0.70
DEFAULT_NMS = 0.45


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: int
    pad_y: int
    width: int
    height: int
    target_w: int = 416
    target_h: int = 416

    def to_original(self, cx: float, cy: float, w: float, h: float) -> tuple[float, float, float, float]:
        """Letterboxed normalized box -> original-image normalized box, clamped to the image."""
        x0 = ((cx - w / 2) * self.target_w - self.pad_x) / self.scale
        x1 = ((cx + w / 2) * self.target_w - self.pad_x) / self.scale
        y0 = ((cy - h / 2) * self.target_h - self.pad_y) / self.scale
        y1 = ((cy + h / 2) * self.target_h - self.pad_y) / self.scale
        x0, x1 = _clamp_span(x0, x1, self.width)
        y0, y1 = _clamp_span(y0, y1, self.height)
        return ((x0 + x1) / 2 / self.width, (y0 + y1) / 2 / self.height,
                (x1 - x0) / self.width, (y1 - y0) / self.height)

    def point_to_original(self, x: float, y: float) -> tuple[float, float]:
        """Pixel in the letterboxed frame -> pixel in the original image (unclamped)."""
        return (x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale

    def point_to_letterbox(self, x: float, y: float) -> tuple[float, float]:
        return x * self.scale + self.pad_x, y * self.scale + self.pad_y


def _clamp_span(lo: float, hi: float, size: int) -> tuple[float, float]:
    lo = min(max(lo, 0.0), size)
    hi = min(max(hi, 0.0), size)
    # keep at least one pixel so w, h stay positive
    if hi - lo < 1.0:
        if lo + 1.0 <= size:
            hi = lo + 1.0
        else:
            lo = size - 1.0
            hi = float(size)
    return lo, hi


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    w: float
    h: float
    class_id: int
    objectness: float
    class_prob: float = 1.0

    @property
    def confidence(self) -> float:
        return self.objectness * self.class_prob

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def to_json(self) -> dict:
        return {
            "x": round(self.x, 6), "y": round(self.y, 6), "w": round(self.w, 6), "h": round(self.h, 6),
            "class": self.class_id, "objectness": round(self.objectness, 6),
            "confidence": round(self.confidence, 6),
        }


# ---------------------------------------------------------------------------
# images


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary P6 reader, maxval 255."""
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return pixels.reshape(h, w, 3).copy()


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def load_image(path: str | Path) -> np.ndarray:
    """RGB uint8 array (H, W, 3) from PPM, PNG or JPEG."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


def save_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        write_ppm(path, image)
        return
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path)


def resize_bilinear(image: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an (H, W, C) float32 array."""
    h, w = image.shape[:2]

    def axis(n_out, n_in):
        src = (np.arange(n_out, dtype=np.float32) + 0.5) * np.float32(n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(np.float32)

    y0, y1, wy = axis(new_h, h)
    x0, x1, wx = axis(new_w, w)
    top = image[y0][:, x0] + (image[y0][:, x1] - image[y0][:, x0]) * wx[None, :, None]
    bot = image[y1][:, x0] + (image[y1][:, x1] - image[y1][:, x0]) * wx[None, :, None]
    return top + (bot - top) * wy[:, None, None]


def letterbox(image: np.ndarray, target: int | tuple[int, int] = 416) -> tuple[np.ndarray, LetterboxTransform]:
    """Aspect-preserving resize into a gray canvas; returns a (1, 3, th, tw) float32 tensor."""
    tw, th = (target, target) if isinstance(target, int) else target
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if w < 1 or h < 1:
        raise ShapeError("image has a zero dimension")
    scale = min(tw / w, th / h)
    new_w = min(tw, max(1, int(round(w * scale))))
    new_h = min(th, max(1, int(round(h * scale))))
    pad_x, pad_y = (tw - new_w) // 2, (th - new_h) // 2
    pixels = image.astype(np.float32) / np.float32(255.0)
    resized = pixels if (new_w, new_h) == (w, h) else resize_bilinear(pixels, new_w, new_h)
    canvas = np.full((th, tw, 3), PAD_VALUE, dtype=np.float32)
    canvas[pad_y:pad_y + new_h, pad_x:pad_x + new_w] = resized
    tensor = np.ascontiguousarray(canvas.transpose(2, 0, 1)[None])
    return tensor, LetterboxTransform(scale, pad_x, pad_y, w, h, tw, th)


# ---------------------------------------------------------------------------
# decoding


def sigmoid(x: np.ndarray) -> np.ndarray:
    return (1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64))))


def decode_yolo(head: np.ndarray, anchors: Sequence[tuple[int, int]], mask: Sequence[int], classes: int,
                input_dim: int | tuple[int, int] = 416, conf_threshold: float = DEFAULT_CONF) -> list[Detection]:
    """Decode one raw head (c, gh, gw) or (1, c, gh, gw), keeping objectness*max class prob >= threshold."""
    head = np.asarray(head, dtype=np.float64)
    if head.ndim == 4:
        if head.shape[0] != 1:
            raise ShapeError("decode_yolo takes a single image head")
        head = head[0]
    in_w, in_h = (input_dim, input_dim) if isinstance(input_dim, int) else input_dim
    n_a = len(mask)
    c, gh, gw = head.shape
    if c != n_a * (5 + classes):
        raise ShapeError(f"head has {c} channels, expected {n_a}*(5+{classes})")
    head = head.reshape(n_a, 5 + classes, gh, gw)
    obj = sigmoid(head[:, 4])
    probs = sigmoid(head[:, 5:])
    best = probs.argmax(axis=1)
    best_p = np.take_along_axis(probs, best[:, None], axis=1)[:, 0]
    conf = obj * best_p
    dets = []
    for a, i, j in zip(*np.nonzero(conf >= conf_threshold)):
        aw, ah = anchors[mask[a]]
        tx, ty, tw_, th_ = head[a, :4, i, j]
        dets.append(Detection(
            float((sigmoid(tx) + j) / gw),
            float((sigmoid(ty) + i) / gh),
            float(aw * np.exp(tw_) / in_w),
            float(ah * np.exp(th_) / in_h),
            int(best[a, i, j]),
            float(obj[a, i, j]),
            float(best_p[a, i, j]),
        ))
    return dets


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_NMS) -> list[Detection]:
    """Greedy per-class suppression; output sorted by confidence, ties by input order."""
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].confidence, k))
    kept: list[Detection] = []
    for k in order:
        d = dets[k]
        if all(o.class_id != d.class_id or iou(o.box, d.box) < iou_threshold for o in kept):
            kept.append(d)
    return kept


# ---------------------------------------------------------------------------
# engines


class Engine(Protocol):
    graph: NetworkGraph
    name: str

    def heads(self, x: np.ndarray) -> list[np.ndarray]:
        """Raw float heads for a (1, c, h, w) network input."""


class FloatEngine:
    """Float32 reference path on the host."""

    name = "float"

    def __init__(self, graph: NetworkGraph, store: WeightStore):
        self.graph = graph
        self.store = fold_batchnorm(store)

    def heads(self, x):
        return forward(self.graph, self.store, x)


class QuantEngine:
    """Compiled int8 program on the emulated DPU; heads are dequantized for the host."""

    name = "quant"

    def __init__(self, model: quantizer.QuantizedModel):
        self.model = model
        self.graph = model.graph
        self.program = compiler.compile_graph(model.graph, "int8", weights=model)

    def raw_heads(self, x):
        return compiler.execute(self.program, x)

    def heads(self, x):
        return [quantizer.dequantize(h, f) for h, f in zip(self.raw_heads(x), self.program.output_fraction_bits)]


def decode_all(graph: NetworkGraph, heads: Sequence[np.ndarray], conf_threshold: float) -> list[Detection]:
    dets: list[Detection] = []
    for layer, head in zip(graph.yolo_layers, heads):
        dets += decode_yolo(head, layer.anchors, layer.mask, layer.classes,
                            (graph.input_width, graph.input_height), conf_threshold)
    return dets


def detect(image: np.ndarray, engine: Engine, conf_threshold: float = DEFAULT_CONF,
           nms_threshold: float = DEFAULT_NMS) -> list[Detection]:
    """Full pipeline for one RGB image; boxes normalized to the original image."""
    if not 0 < conf_threshold <= 1:
        raise ValueError("confidence threshold must lie in (0, 1]")
    graph = engine.graph
    x, tf = letterbox(image, (graph.input_width, graph.input_height))
    dets = nms(decode_all(graph, engine.heads(x), conf_threshold), nms_threshold)
    out = []
    for d in dets:
        bx = tf.to_original(d.x, d.y, d.w, d.h)
        out.append(Detection(*bx, d.class_id, d.objectness, d.class_prob))
    return out


def detections_record(image_name: str, dets: Sequence[Detection]) -> dict:
    return {"image": image_name, "detections": [d.to_json() for d in dets]}


def annotate(image: np.ndarray, dets: Sequence[Detection], color=(255, 0, 0)) -> np.ndarray:
    """Copy of ``image`` with boxes and confidence labels burned in.

    Labels sit just inside the top-left corner of their box, so every
    changed pixel lies within the (clamped) box outline.
    """
    from PIL import Image, ImageDraw

    h, w = image.shape[:2]
    im = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8))
    draw = ImageDraw.Draw(im)
    for d in dets:
        x0, y0, x1, y1 = box_pixels(d, w, h)
        draw.rectangle((x0, y0, x1, y1), outline=color, width=2)
        label = f"{d.confidence:.2f}"
        tx0, ty0, tx1, ty1 = draw.textbbox((x0 + 3, y0 + 3), label)
        if tx1 <= x1 - 2 and ty1 <= y1 - 2:
            draw.text((x0 + 3, y0 + 3), label, fill=color)
    return np.asarray(im).copy()


def box_pixels(d: Detection, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer pixel corners (inclusive) of a normalized detection."""
    x0 = int(round((d.x - d.w / 2) * width))
    y0 = int(round((d.y - d.h / 2) * height))
    x1 = int(round((d.x + d.w / 2) * width)) - 1
    y1 = int(round((d.y + d.h / 2) * height)) - 1
    x0, y0 = max(0, x0), max(0, y0)
    return x0, y0, max(x0, min(width - 1, x1)), max(y0, min(height - 1, y1))
