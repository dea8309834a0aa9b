"""Symmetric INT8 post-training quantization with power-of-two scales.

A value ``q`` with ``f`` fraction bits represents ``q * 2**-f``. Weights and
activations are int8; biases are int32 at ``f_in + f_weights`` so they add
straight into the accumulator. Requantization is a rounding arithmetic
shift, which keeps the integer path bit-exact on any host.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .model_ir import NetworkGraph, WeightStore, fold_batchnorm, parse_config, serialize_config
from .tensor_engine import ShapeError, im2col, run_layers

F_MIN, F_MAX = -16, 16
INT8_MIN, INT8_MAX = -128, 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
MAGIC = b"BQNT1"
CONTAINER_VERSION = 1


class QuantConfigError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerQuant:
    """Fraction bits of one layer. ``f_weights``/``f_bias`` are set for convolutions only."""

    f_in: int
    f_out: int
    f_weights: int | None = None
    f_bias: int | None = None

    @property
    def shift(self) -> int:
        return self.f_in + self.f_weights - self.f_out


@dataclass(frozen=True)
class QuantTable:
    input_f: int
    layers: dict[int, LayerQuant]

    def __getitem__(self, index: int) -> LayerQuant:
        return self.layers[index]

    def to_json(self) -> dict:
        return {
            "input_f": self.input_f,
            "layers": {
                str(i): {k: v for k, v in vars(q).items() if v is not None}
                for i, q in sorted(self.layers.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QuantTable":
        return cls(int(obj["input_f"]), {int(i): LayerQuant(**q) for i, q in obj["layers"].items()})


def fraction_bits(maxabs: float) -> int:
    """Largest f such that ``maxabs * 2**f`` stays within 127, clamped to [-16, 16]."""
    if maxabs == 0:
        return F_MAX
    if not math.isfinite(maxabs):
        raise CalibrationError(f"non-finite range {maxabs}")
    return max(F_MIN, min(F_MAX, math.floor(math.log2(127.0 / maxabs))))


def _check_f(f: int) -> None:
    if not F_MIN <= f <= F_MAX:
        raise QuantConfigError(f"fraction bits {f} outside [{F_MIN}, {F_MAX}]")


def round_half_away(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    whole = np.floor(a)
    # compare the exact fractional part; floor(a + 0.5) misrounds 0.49999999999999994
    return np.sign(x) * (whole + (a - whole >= 0.5))


def quantize_with_stats(x: np.ndarray, f: int) -> tuple[np.ndarray, int]:
    """int8 quantization plus the number of saturated elements (``|x * 2**f| > 127.5``)."""
    _check_f(f)
    scaled = np.ldexp(np.asarray(x, dtype=np.float64), f)
    saturated = int(np.count_nonzero(np.abs(scaled) > 127.5))
    q = np.clip(round_half_away(scaled), INT8_MIN, INT8_MAX).astype(np.int8)
    return q, saturated


def quantize_tensor(x: np.ndarray, f: int) -> np.ndarray:
    return quantize_with_stats(x, f)[0]


def quantize_bias(b: np.ndarray, f: int) -> tuple[np.ndarray, int]:
    scaled = round_half_away(np.ldexp(np.asarray(b, dtype=np.float64), f))
    saturated = int(np.count_nonzero((scaled < INT32_MIN) | (scaled > INT32_MAX)))
    return np.clip(scaled, INT32_MIN, INT32_MAX).astype(np.int32), saturated


def dequantize(q: np.ndarray, f: int) -> np.ndarray:
    return np.ldexp(np.asarray(q, dtype=np.float64), -f).astype(np.float32)


def shift_round(acc: np.ndarray, s: int) -> np.ndarray:
    """Requantizing shift on an int64 accumulator, before saturation.

    s > 0: ``(acc + 2**(s-1)) >> s`` (arithmetic, so negatives floor);
    s <= 0: ``acc << -s``.
    """
    if not -31 <= s <= 31:
        raise QuantConfigError(f"requantization shift {s} outside [-31, 31]")
    acc = np.asarray(acc, dtype=np.int64)
    if s > 0:
        return (acc + (1 << (s - 1))) >> s
    if s < 0:
        # anything beyond int32 saturates anyway; bounding first keeps the shift inside int64
        return np.clip(acc, INT32_MIN, INT32_MAX) << -s
    return acc


def saturate_int8(acc: np.ndarray) -> np.ndarray:
    return np.clip(acc, INT8_MIN, INT8_MAX).astype(np.int8)


def requantize(acc: np.ndarray, s: int) -> np.ndarray:
    return saturate_int8(shift_round(acc, s))


def rescale(q: np.ndarray, f_src: int, f_dst: int) -> np.ndarray:
    """Move an int8 tensor between fraction-bit positions."""
    if f_src == f_dst:
        return q
    return requantize(q.astype(np.int64), f_src - f_dst)


def int_activation(acc: np.ndarray, kind: str, f_acc: int) -> np.ndarray:
    """Activation on an int64 accumulator holding values at ``f_acc`` fraction bits."""
    if kind == "linear":
        return acc
    if kind == "leaky":
        # exact x0.1 with round-half-away on negatives
        neg = -((-acc + 5) // 10)
        return np.where(acc < 0, neg, acc)
    if kind == "relu":
        return np.maximum(acc, 0)
    if kind == "relu6":
        six = 6 << f_acc if f_acc >= 0 else int(round_half_away(np.float64(6.0 * 2.0**f_acc)))
        return np.clip(acc, 0, six)
    raise ValueError(f"unknown activation {kind!r}")


def int_conv_accumulate(q_in: np.ndarray, q_w: np.ndarray, stride: int, pad: bool) -> np.ndarray:
    """Integer cross-correlation, int64 result of shape (n, f, oh, ow).

    The matmul runs in float64: every product and partial sum is an integer
    far below 2**53, so the result is exact regardless of summation order or
    BLAS threading.
    """
    n, c = q_in.shape[:2]
    f, kc, k, _ = q_w.shape
    if kc != c:
        raise ShapeError(f"qconv2d: input has {c} channels, kernels {q_w.shape}")
    if c * k * k * 128 * 128 >= 2**53:
        raise QuantConfigError("convolution too deep for exact float64 accumulation")
    cols, oh, ow = im2col(q_in.astype(np.float64), k, stride, k // 2 if pad else 0)
    acc = cols @ q_w.reshape(f, -1).astype(np.float64).T
    return acc.astype(np.int64).transpose(0, 2, 1).reshape(n, f, oh, ow)


def qconv2d(q_in: np.ndarray, q_w: np.ndarray, q_bias: np.ndarray | None, params: LayerQuant,
            stride: int = 1, pad: bool = False, activation: str = "linear") -> np.ndarray:
    """Fixed-point convolution: int32 accumulate + bias, activation, rounding shift to int8."""
    s = params.shift
    if not -31 <= s <= 31:
        raise QuantConfigError(f"requantization shift {s} outside [-31, 31]")
    acc = int_conv_accumulate(q_in, q_w, stride, pad)
    if q_bias is not None:
        acc += q_bias.astype(np.int64)[None, :, None, None]
    acc = np.clip(acc, INT32_MIN, INT32_MAX)
    acc = int_activation(acc, activation, params.f_in + params.f_weights)
    return requantize(acc, s)


def qadd(a: np.ndarray, f_a: int, b: np.ndarray, f_b: int, f_out: int, activation: str = "linear") -> np.ndarray:
    """Shortcut addition: align both operands to the finer scale, add, requantize."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    f_acc = max(f_a, f_b)
    acc = (a.astype(np.int64) << (f_acc - f_a)) + (b.astype(np.int64) << (f_acc - f_b))
    return requantize(int_activation(acc, activation, f_acc), f_acc - f_out)


def qconcat(parts: list[tuple[np.ndarray, int]], f_out: int) -> np.ndarray:
    return np.concatenate([rescale(q, f, f_out) for q, f in parts], axis=1)


# ---------------------------------------------------------------------------
# calibration and network quantization


def _maxabs(x: np.ndarray) -> float:
    return float(np.max(np.abs(x))) if x.size else 0.0


def calibrate(graph: NetworkGraph, store: WeightStore, images: Iterable[np.ndarray]) -> QuantTable:
    """Choose fraction bits from max-abs ranges seen over float inference on ``images``.

    ``images`` are network-ready float tensors (1, c, h, w). Weight ranges
    come from the batch-norm-folded kernels.
    """
    store = fold_batchnorm(store)
    ranges = np.zeros(len(graph.layers))
    input_range = 0.0
    count = 0
    for image in images:
        count += 1
        image = np.asarray(image, dtype=np.float32)
        if not np.all(np.isfinite(image)):
            raise CalibrationError(f"calibration image {count - 1} has non-finite pixels")
        input_range = max(input_range, _maxabs(image))
        for i, out in enumerate(run_layers(graph, store, image)):
            m = _maxabs(out)
            if not math.isfinite(m):
                raise CalibrationError(f"layer {i} ({graph.layers[i].kind}) produced non-finite activations")
            ranges[i] = max(ranges[i], m)
    if count == 0:
        raise CalibrationError("empty calibration set")
    return table_from_ranges(graph, store, input_range, ranges)


def table_from_ranges(graph: NetworkGraph, store: WeightStore, input_range: float, ranges) -> QuantTable:
    input_f = fraction_bits(input_range)
    fs: list[int] = []
    layers: dict[int, LayerQuant] = {}
    for layer in graph.layers:
        i = layer.index
        f_in = fs[i - 1] if i else input_f
        kind = layer.kind
        if kind == "convolutional":
            f_w = fraction_bits(_maxabs(store[i].kernels))
            f_out = fraction_bits(ranges[i])
            q = LayerQuant(f_in, f_out, f_w, f_in + f_w)
            if not -31 <= q.shift <= 31:
                raise QuantConfigError(f"layer {i}: requantization shift {q.shift} outside [-31, 31]")
        elif kind == "route":
            q = LayerQuant(f_in, min(fs[s] for s in layer.sources))
        elif kind == "shortcut":
            q = LayerQuant(f_in, fraction_bits(ranges[i]))
        else:  # maxpool, upsample, yolo are exact in the integer domain
            q = LayerQuant(f_in, f_in)
        layers[i] = q
        fs.append(q.f_out)
    return QuantTable(input_f, layers)


@dataclass(frozen=True)
class QuantizedModel:
    graph: NetworkGraph
    table: QuantTable
    kernels: dict[int, np.ndarray]
    biases: dict[int, np.ndarray]
    saturation: dict[int, int] = field(default_factory=dict)

    def head_fraction_bits(self) -> list[int]:
        return [self.table[l.index].f_out for l in self.graph.yolo_layers]


def quantize_network(graph: NetworkGraph, store: WeightStore, table: QuantTable) -> QuantizedModel:
    """Quantize folded kernels to int8 and biases to int32; saturations recorded per layer."""
    store = fold_batchnorm(store)
    kernels, biases, saturation = {}, {}, {}
    for layer in graph.conv_layers:
        i = layer.index
        if i not in table.layers or table[i].f_weights is None:
            raise QuantConfigError(f"layer {i}: no quantization entry")
        q = table[i]
        kernels[i], sat_w = quantize_with_stats(store[i].kernels, q.f_weights)
        biases[i], sat_b = quantize_bias(store[i].biases, q.f_bias)
        saturation[i] = sat_w + sat_b
    return QuantizedModel(graph, table, kernels, biases, saturation)


def save_quantized(model: QuantizedModel) -> bytes:
    """Serialize as ``BQNT1`` + u32 header length + JSON header + little-endian arrays."""
    arrays, chunks, offset = [], [], 0
    for i in sorted(model.kernels):
        for name, arr, dtype in (("kernels", model.kernels[i], "<i1"), ("biases", model.biases[i], "<i4")):
            raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            arrays.append({"layer": i, "name": name, "dtype": dtype, "shape": list(arr.shape),
                           "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "version": CONTAINER_VERSION,
        "cfg": serialize_config(model.graph),
        "table": model.table.to_json(),
        "saturation": {str(k): v for k, v in sorted(model.saturation.items())},
        "arrays": arrays,
    }
    head = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def load_quantized(blob: bytes) -> QuantizedModel:
    if blob[: len(MAGIC)] != MAGIC:
        raise QuantConfigError("not a quantized model container (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(blob[start:start + hlen].decode())
    if header.get("version") != CONTAINER_VERSION:
        raise QuantConfigError(f"unsupported container version {header.get('version')}")
    payload = memoryview(blob)[start + hlen:]
    kernels, biases = {}, {}
    for a in header["arrays"]:
        arr = np.frombuffer(payload[a["offset"]:a["offset"] + a["nbytes"]], dtype=a["dtype"])
        arr = arr.reshape(a["shape"]).astype(np.int8 if a["name"] == "kernels" else np.int32)
        (kernels if a["name"] == "kernels" else biases)[a["layer"]] = arr
    graph = parse_config(header["cfg"])
    return QuantizedModel(graph, QuantTable.from_json(header["table"]), kernels, biases,
                          {int(k): v for k, v in header["saturation"].items()})


def write_quantized(model: QuantizedModel, path: str | Path) -> None:
    Path(path).write_bytes(save_quantized(model))


def read_quantized(path: str | Path) -> QuantizedModel:
    return load_quantized(Path(path).read_bytes())
