"""Procedural strawberry scenes with Darknet labels.

Used to build the committed test fixtures (labeled set, calibration slice,
frame sequence) and as the training stream for the fixture model.

    python scripts/synth_strawberries.py tests/data/strawberries --count 24 --seed 1000
"""

from __future__ import annotations

import argparse
import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

SIZES = [(640, 480), (480, 640), (416, 416), (800, 600), (512, 384)]


def _background(rng: np.random.Generator, w: int, h: int) -> Image.Image:
    base = np.array([rng.uniform(40, 90), rng.uniform(90, 150), rng.uniform(30, 70)])
    yy = np.linspace(0, 1, h)[:, None, None]
    grad = base * (0.75 + 0.5 * yy) + rng.normal(0, 12, (h, w, 3))
    im = Image.fromarray(np.clip(grad, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(im)
    # soil strips
    for _ in range(rng.integers(0, 3)):
        y = rng.uniform(0, h)
        col = tuple(int(v) for v in rng.uniform([80, 55, 30], [130, 95, 60]))
        draw.rectangle((0, y, w, y + rng.uniform(10, h / 6)), fill=col)
    _leaves(rng, draw, w, h, int(rng.integers(12, 30)))
    return im


def _leaves(rng, draw, w, h, n):
    for _ in range(n):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(15, 70)
        ang = rng.uniform(0, math.pi)
        pts = []
        for t in np.linspace(0, 2 * math.pi, 24, endpoint=False):
            x, y = r * math.cos(t), 0.45 * r * math.sin(t)
            pts.append((cx + x * math.cos(ang) - y * math.sin(ang), cy + x * math.sin(ang) + y * math.cos(ang)))
        g = rng.uniform(0.6, 1.3)
        draw.polygon(pts, fill=(int(35 * g), int(120 * g), int(40 * g)))


def _berry(rng, draw, cx, cy, size):
    """Draw one berry; returns its pixel bounding box."""
    half_w = size / 2
    height = size * rng.uniform(1.05, 1.3)
    top = cy - height * 0.45
    pts = []
    for t in np.linspace(0, math.pi, 30):
        # rounded shoulders tapering to a tip
        x = half_w * math.sin(t) ** 0.5 * (1.15 - 0.45 * t / math.pi)
        y = top + height * (1 - math.cos(t)) / 2
        pts.append((x, y))
    outline = [(cx + x, y) for x, y in pts] + [(cx - x, y) for x, y in reversed(pts)]
    red = (int(rng.uniform(170, 235)), int(rng.uniform(10, 50)), int(rng.uniform(25, 60)))
    draw.polygon(outline, fill=red)
    # highlight and seeds
    draw.ellipse((cx - half_w * 0.5, top + height * 0.12, cx - half_w * 0.1, top + height * 0.35),
                 fill=tuple(min(255, c + 40) for c in red))
    for _ in range(int(size / 4)):
        sx = cx + rng.uniform(-0.6, 0.6) * half_w
        sy = top + rng.uniform(0.15, 0.85) * height
        draw.ellipse((sx - 1, sy - 1, sx + 1, sy + 1), fill=(230, 210, 90))
    # calyx
    for k in range(5):
        a = math.pi * (0.1 + 0.8 * k / 4)
        tip = (cx + math.cos(a) * half_w * 0.9, top - math.sin(a) * size * 0.1 + size * 0.05)
        draw.polygon([(cx - size * 0.08, top + size * 0.04), (cx + size * 0.08, top + size * 0.04), tip],
                     fill=(40, 140, 50))
    return cx - half_w, top - size * 0.06, cx + half_w, top + height


def render_scene(rng: np.random.Generator, size: tuple[int, int] | None = None, max_berries: int = 4,
                 min_berries: int = 1) -> tuple[np.ndarray, list[tuple[int, float, float, float, float]]]:
    w, h = size or SIZES[rng.integers(len(SIZES))]
    im = _background(rng, w, h)
    draw = ImageDraw.Draw(im)
    boxes: list[tuple[float, float, float, float]] = []
    n = int(rng.integers(min_berries, max_berries + 1))
    short = min(w, h)
    for _ in range(n * 10):
        if len(boxes) == n:
            break
        s = rng.uniform(0.08, 0.28) * short
        cx, cy = rng.uniform(s, w - s), rng.uniform(s, h - s)
        cand = (cx - s / 2, cy - s * 0.6, cx + s / 2, cy + s * 0.75)
        if any(_overlap(cand, b) for b in boxes):
            continue
        boxes.append(_berry(rng, draw, cx, cy, s))
    # a few leaves in front, small enough to leave berries mostly visible
    _leaves(rng, draw, w, h, int(rng.integers(0, 3)))
    im = im.filter(ImageFilter.GaussianBlur(rng.uniform(0.3, 1.0)))
    labels = []
    for x0, y0, x1, y1 in boxes:
        x0, y0, x1, y1 = max(0, x0), max(0, y0), min(w, x1), min(h, y1)
        labels.append((0, (x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h))
    return np.asarray(im), labels


def _overlap(a, b, margin=4):
    return not (a[2] + margin < b[0] or b[2] + margin < a[0] or a[3] + margin < b[1] or b[3] + margin < a[1])


def write_set(out: Path, count: int, seed: int, prefix: str = "berry", ext: str = ".png",
              labels: bool = True, min_berries: int = 1) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for k in range(count):
        image, boxes = render_scene(rng, min_berries=min_berries)
        name = f"{prefix}_{k:03d}"
        Image.fromarray(image).save(out / f"{name}{ext}")
        if labels:
            (out / f"{name}.txt").write_text(
                "".join(f"{c} {x:.6f} {y:.6f} {bw:.6f} {bh:.6f}\n" for c, x, y, bw, bh in boxes))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--count", type=int, default=24)
    ap.add_argument("--seed", type=int, default=1000)
    ap.add_argument("--prefix", default="berry")
    ap.add_argument("--ext", default=".png")
    ap.add_argument("--no-labels", action="store_true")
    ap.add_argument("--min-berries", type=int, default=1)
    args = ap.parse_args()
    write_set(args.out, args.count, args.seed, args.prefix, args.ext, not args.no_labels, args.min_berries)


if __name__ == "__main__":
    main()
