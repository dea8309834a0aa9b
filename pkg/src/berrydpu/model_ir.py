"""Darknet network description: cfg parsing, weight files, batch-norm folding.

The graph is the IR every other module consumes. Layer references in a
parsed graph are always absolute indices into ``NetworkGraph.layers``.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

LAYER_KINDS = ("convolutional", "shortcut", "route", "upsample", "maxpool", "yolo")
ACTIVATIONS = ("linear", "leaky", "relu", "relu6")
BN_EPS = 1e-6

_SECTION_ALIASES = {
    "net": "net",
    "network": "net",
    "convolutional": "convolutional",
    "conv": "convolutional",
    "shortcut": "shortcut",
    "route": "route",
    "upsample": "upsample",
    "maxpool": "maxpool",
    "max": "maxpool",
    "yolo": "yolo",
}

# keys that carry no inference semantics; accepted silently
_IGNORED_KEYS = {
    "net": {
        "batch", "subdivisions", "momentum", "decay", "angle", "saturation",
        "exposure", "hue", "learning_rate", "burn_in", "max_batches", "policy",
        "steps", "scales", "mosaic", "flip", "max_epochs",
    },
    "convolutional": set(),
    "shortcut": set(),
    "route": set(),
    "upsample": set(),
    "maxpool": set(),
    "yolo": {
        "num", "jitter", "ignore_thresh", "truth_thresh", "random",
        "scale_x_y", "iou_thresh", "cls_normalizer", "iou_normalizer",
        "iou_loss", "nms_kind", "beta_nms", "max_delta", "resize",
    },
}


class ConfigError(ValueError):
    """Malformed network configuration. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class WeightsError(ValueError):
    """Weight blob does not fit the graph or holds invalid values."""


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str
    filters: int = 0
    size: int = 1
    stride: int = 1
    pad: bool = False
    batch_normalize: bool = False
    activation: str = "linear"
    # route sources, or the single ``from`` of a shortcut
    sources: tuple[int, ...] = ()
    mask: tuple[int, ...] = ()
    anchors: tuple[tuple[int, int], ...] = ()
    classes: int = 0

    @property
    def padding(self) -> int:
        return self.size // 2 if self.pad else 0


@dataclass(frozen=True)
class NetworkGraph:
    layers: tuple[LayerSpec, ...]
    input_width: int = 416
    input_height: int = 416
    input_channels: int = 3
    shapes: tuple[tuple[int, int, int], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", tuple(_propagate_shapes(self)))

    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_channels, self.input_height, self.input_width)

    def in_shape(self, index: int) -> tuple[int, int, int]:
        """Shape fed to layer ``index`` (previous layer output, or the network input)."""
        return self.shapes[index - 1] if index > 0 else self.input_shape()

    @property
    def yolo_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "yolo"]

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "convolutional"]

    def kernel_shape(self, index: int) -> tuple[int, int, int, int]:
        layer = self.layers[index]
        return (layer.filters, self.in_shape(index)[0], layer.size, layer.size)


def _propagate_shapes(graph: NetworkGraph) -> list[tuple[int, int, int]]:
    if graph.input_width < 1 or graph.input_height < 1 or graph.input_channels < 1:
        raise ConfigError("input geometry must be positive")
    if not graph.layers:
        raise ConfigError("network has no layers")
    shapes: list[tuple[int, int, int]] = []
    for i, layer in enumerate(graph.layers):
        if layer.index != i:
            raise ConfigError(f"layer {i} carries index {layer.index}")
        if layer.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {i}: unsupported kind {layer.kind!r}")
        c, h, w = shapes[i - 1] if i else (graph.input_channels, graph.input_height, graph.input_width)
        for src in layer.sources:
            if not 0 <= src < i:
                raise ConfigError(f"layer {i} ({layer.kind}) references layer {src}, not an earlier layer")
        kind = layer.kind
        if kind == "convolutional":
            if layer.filters < 1 or layer.size < 1 or layer.stride < 1:
                raise ConfigError(f"layer {i}: filters, size and stride must be >= 1")
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation {layer.activation!r}")
            p = layer.padding
            oh = (h + 2 * p - layer.size) // layer.stride + 1
            ow = (w + 2 * p - layer.size) // layer.stride + 1
            out = (layer.filters, oh, ow)
        elif kind == "maxpool":
            if layer.size < 1 or layer.stride < 1:
                raise ConfigError(f"layer {i}: maxpool size and stride must be >= 1")
            pad = layer.size - 1
            out = (c, (h + pad - layer.size) // layer.stride + 1, (w + pad - layer.size) // layer.stride + 1)
        elif kind == "upsample":
            if layer.stride < 1:
                raise ConfigError(f"layer {i}: upsample stride must be >= 1")
            out = (c, h * layer.stride, w * layer.stride)
        elif kind == "route":
            if not layer.sources:
                raise ConfigError(f"layer {i}: route without sources")
            src_shapes = [shapes[s] for s in layer.sources]
            if len({s[1:] for s in src_shapes}) != 1:
                raise ConfigError(f"layer {i}: route sources differ in spatial size: {src_shapes}")
            out = (sum(s[0] for s in src_shapes),) + src_shapes[0][1:]
        elif kind == "shortcut":
            if len(layer.sources) != 1:
                raise ConfigError(f"layer {i}: shortcut needs exactly one source")
            if shapes[layer.sources[0]] != (c, h, w):
                raise ConfigError(f"layer {i}: shortcut shapes differ")
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation {layer.activation!r}")
            out = (c, h, w)
        else:  # yolo
            if not layer.mask or any(not 0 <= m < len(layer.anchors) for m in layer.mask):
                raise ConfigError(f"layer {i}: yolo mask entries must index the anchor list")
            if layer.classes < 1:
                raise ConfigError(f"layer {i}: yolo classes must be >= 1")
            expected = len(layer.mask) * (5 + layer.classes)
            if c != expected:
                raise ConfigError(f"layer {i}: yolo head has {c} channels, expected {expected}")
            out = (c, h, w)
        if min(out) < 1:
            raise ConfigError(f"layer {i}: output shape {out} is empty")
        shapes.append(out)
    return shapes


# ---------------------------------------------------------------------------
# cfg text


def _int(value: str, key: str, line: int) -> int:
    try:
        return int(value.strip())
    except ValueError:
        raise ConfigError(f"{key}={value!r} is not an integer", line) from None


def _int_list(value: str, key: str, line: int) -> list[int]:
    return [_int(v, key, line) for v in value.split(",") if v.strip()]


def _read_sections(text: str) -> list[tuple[str, int, dict[str, tuple[str, int]]]]:
    sections: list[tuple[str, int, dict[str, tuple[str, int]]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            name = line[1:-1].strip().lower()
            if name not in _SECTION_ALIASES:
                raise ConfigError(f"unknown section [{name}]", lineno)
            sections.append((_SECTION_ALIASES[name], lineno, {}))
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", lineno)
        if not sections:
            raise ConfigError("key=value before the first section", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        sections[-1][2][key] = (value, lineno)
    return sections


def parse_config(text: str) -> NetworkGraph:
    """Parse Darknet cfg text into a validated graph.

    Relative route/shortcut references are resolved against the index of
    the layer that carries them.
    """
    sections = _read_sections(text)
    if not sections or sections[0][0] != "net":
        raise ConfigError("missing [net] section (it must come first)", sections[0][1] if sections else None)
    _, _, net = sections[0]

    def net_int(key, default):
        return _int(net[key][0], key, net[key][1]) if key in net else default

    width, height, channels = net_int("width", 416), net_int("height", 416), net_int("channels", 3)
    for key in set(net) - {"width", "height", "channels"} - _IGNORED_KEYS["net"]:
        log.warning("line %d: ignoring unknown [net] key %r", net[key][1], key)

    layers = []
    for index, (kind, header_line, kv) in enumerate(sections[1:]):
        if kind == "net":
            raise ConfigError("second [net] section", header_line)
        layers.append(_build_layer(index, kind, header_line, kv))
    try:
        return NetworkGraph(tuple(layers), width, height, channels)
    except ConfigError as err:
        if err.line is not None:
            raise
        # attach the header line of the offending layer when we can tell which one
        msg = str(err)
        if msg.startswith("layer "):
            idx = int(msg.split()[1].rstrip(":"))
            raise ConfigError(msg, sections[idx + 1][1]) from None
        raise


def _build_layer(index: int, kind: str, header_line: int, kv: dict[str, tuple[str, int]]) -> LayerSpec:
    known: set[str] = set()

    def get_int(key, default):
        known.add(key)
        if key not in kv:
            return default
        return _int(kv[key][0], key, kv[key][1])

    def get_str(key, default):
        known.add(key)
        return kv[key][0].strip().lower() if key in kv else default

    def resolve(ref: int, key: str) -> int:
        absolute = index + ref if ref < 0 else ref
        if not 0 <= absolute < index:
            raise ConfigError(f"{key} reference {ref} resolves to {absolute}, outside [0, {index})",
                              kv[key][1])
        return absolute

    if kind == "convolutional":
        activation = get_str("activation", "logistic")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unsupported activation {activation!r}", kv.get("activation", ("", header_line))[1])
        spec = LayerSpec(
            index, kind,
            filters=get_int("filters", 1),
            size=get_int("size", 1),
            stride=get_int("stride", 1),
            pad=bool(get_int("pad", 0)),
            batch_normalize=bool(get_int("batch_normalize", 0)),
            activation=activation,
        )
    elif kind == "maxpool":
        size = get_int("size", 1)
        spec = LayerSpec(index, kind, size=size, stride=get_int("stride", size))
    elif kind == "upsample":
        spec = LayerSpec(index, kind, stride=get_int("stride", 2))
    elif kind == "route":
        known.add("layers")
        if "layers" not in kv:
            raise ConfigError("route without layers=", header_line)
        refs = _int_list(kv["layers"][0], "layers", kv["layers"][1])
        spec = LayerSpec(index, kind, sources=tuple(resolve(r, "layers") for r in refs))
    elif kind == "shortcut":
        known.add("from")
        if "from" not in kv:
            raise ConfigError("shortcut without from=", header_line)
        ref = _int(kv["from"][0], "from", kv["from"][1])
        activation = get_str("activation", "linear")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unsupported activation {activation!r}", kv["activation"][1])
        spec = LayerSpec(index, kind, sources=(resolve(ref, "from"),), activation=activation)
    else:  # yolo
        known.update({"anchors", "mask"})
        flat = _int_list(kv["anchors"][0], "anchors", kv["anchors"][1]) if "anchors" in kv else []
        if len(flat) % 2:
            raise ConfigError("anchors must come in w,h pairs", kv["anchors"][1])
        anchors = tuple((flat[i], flat[i + 1]) for i in range(0, len(flat), 2))
        mask = tuple(_int_list(kv["mask"][0], "mask", kv["mask"][1])) if "mask" in kv else tuple(range(len(anchors)))
        spec = LayerSpec(index, kind, mask=mask, anchors=anchors, classes=get_int("classes", 20))

    for key in set(kv) - known - _IGNORED_KEYS[kind]:
        log.warning("line %d: ignoring unknown [%s] key %r", kv[key][1], kind, key)
    return spec


def load_config(path: str | Path) -> NetworkGraph:
    return parse_config(Path(path).read_text())


def serialize_config(graph: NetworkGraph) -> str:
    """Inverse of :func:`parse_config` (absolute references, canonical keys)."""
    out = [
        "[net]",
        f"width={graph.input_width}",
        f"height={graph.input_height}",
        f"channels={graph.input_channels}",
    ]
    for layer in graph.layers:
        out.append("")
        out.append(f"[{layer.kind}]")
        if layer.kind == "convolutional":
            if layer.batch_normalize:
                out.append("batch_normalize=1")
            out += [f"filters={layer.filters}", f"size={layer.size}", f"stride={layer.stride}",
                    f"pad={int(layer.pad)}", f"activation={layer.activation}"]
        elif layer.kind == "maxpool":
            out += [f"size={layer.size}", f"stride={layer.stride}"]
        elif layer.kind == "upsample":
            out.append(f"stride={layer.stride}")
        elif layer.kind == "route":
            out.append("layers=" + ",".join(str(s) for s in layer.sources))
        elif layer.kind == "shortcut":
            out += [f"from={layer.sources[0]}", f"activation={layer.activation}"]
        else:
            out.append("mask=" + ",".join(str(m) for m in layer.mask))
            out.append("anchors=" + ", ".join(f"{w},{h}" for w, h in layer.anchors))
            out.append(f"classes={layer.classes}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class ConvWeights:
    biases: np.ndarray
    kernels: np.ndarray
    scales: np.ndarray | None = None
    rolling_mean: np.ndarray | None = None
    rolling_variance: np.ndarray | None = None

    @property
    def batch_normalize(self) -> bool:
        return self.scales is not None


@dataclass(frozen=True)
class WeightStore:
    convs: dict[int, ConvWeights]
    header: tuple[int, int, int, int] = (0, 2, 0, 0)

    def __getitem__(self, index: int) -> ConvWeights:
        return self.convs[index]

    @property
    def folded(self) -> bool:
        return not any(w.batch_normalize for w in self.convs.values())


def _float_count(graph: NetworkGraph) -> int:
    total = 0
    for layer in graph.conv_layers:
        n = layer.filters
        total += n * (4 if layer.batch_normalize else 1) + int(np.prod(graph.kernel_shape(layer.index)))
    return total


def load_weights(graph: NetworkGraph, blob: bytes) -> WeightStore:
    """Decode a Darknet weight blob for ``graph``; the blob must be consumed exactly."""
    if len(blob) < 12:
        raise WeightsError(f"weights blob of {len(blob)} bytes is shorter than the header")
    major, minor, revision = struct.unpack_from("<3i", blob, 0)
    if major * 10 + minor >= 2:
        (seen,) = struct.unpack_from("<q", blob, 12)
        offset = 20
    else:
        (seen,) = struct.unpack_from("<i", blob, 12)
        offset = 16
    expected = _float_count(graph)
    payload = len(blob) - offset
    if payload < 0 or payload % 4 or payload // 4 != expected:
        raise WeightsError(f"weights size mismatch: graph needs {expected} floats, blob holds {payload / 4:g}")
    values = np.frombuffer(blob, dtype="<f4", offset=offset).astype(np.float32)

    pos = 0

    def take(n):
        nonlocal pos
        chunk = values[pos:pos + n].copy()
        pos += n
        return chunk

    convs = {}
    for layer in graph.conv_layers:
        n = layer.filters
        biases = take(n)
        bn = (take(n), take(n), take(n)) if layer.batch_normalize else (None, None, None)
        kshape = graph.kernel_shape(layer.index)
        kernels = take(int(np.prod(kshape))).reshape(kshape)
        convs[layer.index] = ConvWeights(biases, kernels, *bn)
    assert pos == len(values)
    return WeightStore(convs, (major, minor, revision, seen))


def read_weights(graph: NetworkGraph, path: str | Path) -> WeightStore:
    return load_weights(graph, Path(path).read_bytes())


def save_weights(store: WeightStore, graph: NetworkGraph) -> bytes:
    """Encode ``store`` in Darknet order. Header is always written as v0.2 (int64 counter)."""
    major, minor, revision, seen = store.header
    if major * 10 + minor < 2:
        major, minor = 0, 2
    parts = [struct.pack("<3iq", major, minor, revision, seen)]
    for layer in graph.conv_layers:
        w = store[layer.index]
        if layer.batch_normalize != w.batch_normalize:
            raise WeightsError(f"layer {layer.index}: batch_normalize flag does not match the stored arrays")
        arrays = [w.biases]
        if w.batch_normalize:
            arrays += [w.scales, w.rolling_mean, w.rolling_variance]
        arrays.append(w.kernels)
        parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]
    return b"".join(parts)


def fold_batchnorm(store: WeightStore, eps: float = BN_EPS) -> WeightStore:
    """Fold inference-time batch norm into kernels and biases.

    ``kernel *= gamma / sqrt(var + eps)``, ``bias = beta - gamma * mean / sqrt(var + eps)``.
    Layers without batch norm pass through, so folding twice is a no-op.
    """
    out = {}
    for index, w in store.convs.items():
        if not w.batch_normalize:
            out[index] = w
            continue
        var = w.rolling_variance.astype(np.float64)
        if np.any(var < 0) or not np.all(np.isfinite(var)):
            raise WeightsError(f"layer {index}: negative or non-finite rolling variance")
        factor = w.scales.astype(np.float64) / np.sqrt(var + eps)
        kernels = (w.kernels.astype(np.float64) * factor[:, None, None, None]).astype(np.float32)
        biases = (w.biases.astype(np.float64) - factor * w.rolling_mean.astype(np.float64)).astype(np.float32)
        out[index] = ConvWeights(biases, kernels)
    return WeightStore(out, store.header)


def unfold_graph(graph: NetworkGraph) -> NetworkGraph:
    """Same graph with every batch_normalize flag cleared (pairs with a folded store)."""
    return replace(graph, layers=tuple(replace(l, batch_normalize=False) for l in graph.layers))


def random_weights(graph: NetworkGraph, rng: np.random.Generator, scale: float = 1.0) -> WeightStore:
    """He-style random weights; handy for tests and for exercising full-size cfgs."""
    convs = {}
    for layer in graph.conv_layers:
        kshape = graph.kernel_shape(layer.index)
        fan_in = kshape[1] * kshape[2] * kshape[3]
        std = scale * math.sqrt(2.0 / fan_in)
        kernels = rng.normal(0.0, std, size=kshape).astype(np.float32)
        n = layer.filters
        biases = rng.normal(0.0, 0.1, size=n).astype(np.float32)
        if layer.batch_normalize:
            convs[layer.index] = ConvWeights(
                biases, kernels,
                rng.uniform(0.5, 1.5, n).astype(np.float32),
                rng.normal(0.0, 0.1, n).astype(np.float32),
                rng.uniform(0.5, 2.0, n).astype(np.float32),
            )
        else:
            convs[layer.index] = ConvWeights(biases, kernels)
    return WeightStore(convs)


def parameter_count(graph: NetworkGraph, index: int) -> int:
    layer = graph.layers[index]
    if layer.kind != "convolutional":
        return 0
    n = layer.filters
    return int(np.prod(graph.kernel_shape(index))) + n * (4 if layer.batch_normalize else 1)


def bundled_config(name: str) -> Path:
    """Path of a cfg shipped with the package (``yolov3-tiny``, ``strawberry-tiny``)."""
    return Path(__file__).parent / "data" / f"{name}.cfg"


def describe(graph: NetworkGraph) -> Iterable[tuple[int, str, str, tuple[int, int, int], int]]:
    """Rows of (index, kind, detail, output shape, parameter count)."""
    for layer in graph.layers:
        if layer.kind == "convolutional":
            detail = f"{layer.filters} {layer.size}x{layer.size}/{layer.stride} {layer.activation}"
            if layer.batch_normalize:
                detail += " bn"
        elif layer.kind == "maxpool":
            detail = f"{layer.size}x{layer.size}/{layer.stride}"
        elif layer.kind == "upsample":
            detail = f"x{layer.stride}"
        elif layer.kind in ("route", "shortcut"):
            detail = ",".join(str(s) for s in layer.sources)
        else:
            detail = f"mask={','.join(map(str, layer.mask))} classes={layer.classes}"
        yield layer.index, layer.kind, detail, graph.shapes[layer.index], parameter_count(graph, layer.index)
