"""Float32 reference kernels over NCHW numpy arrays.

Tensors are plain ``np.ndarray`` of shape (n, c, h, w) with dtype float32,
int8 or int32. Integer-domain variants live in :mod:`berrydpu.quantizer`
and share the window helpers defined here.
"""

from __future__ import annotations

import numpy as np

from .model_ir import BN_EPS, NetworkGraph, WeightStore

LEAKY_SLOPE = np.float32(0.1)


class ShapeError(ValueError):
    pass


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int, fill=0) -> tuple[np.ndarray, int, int]:
    """Patch matrix (n, oh*ow, c*k*k) plus (oh, ow); columns match kernels.reshape(f, -1)."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    oh = conv_output_size(h, k, stride, pad)
    ow = conv_output_size(w, k, stride, pad)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (n, c, oh, ow, k, k) -> (n, oh, ow, c, k, k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * k * k), oh, ow


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None, stride: int = 1,
           pad: bool = False) -> np.ndarray:
    """Zero-padded cross-correlation; ``pad`` selects k//2 padding on every side."""
    n, c, h, w = x.shape
    f, kc, k, k2 = kernels.shape
    if kc != c or k != k2:
        raise ShapeError(f"conv2d: input has {c} channels, kernels {kernels.shape}")
    p = k // 2 if pad else 0
    cols, oh, ow = im2col(x.astype(np.float32, copy=False), k, stride, p)
    out = cols @ kernels.reshape(f, -1).astype(np.float32, copy=False).T
    if bias is not None:
        out += bias.astype(np.float32)
    return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(n, f, oh, ow))


def apply_activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "linear":
        return x
    if kind == "leaky":
        return np.where(x > 0, x, x * LEAKY_SLOPE).astype(x.dtype)
    if kind == "relu":
        return np.maximum(x, 0).astype(x.dtype)
    if kind == "relu6":
        return np.clip(x, 0, 6).astype(x.dtype)
    raise ValueError(f"unknown activation {kind!r}")


def upsample_nearest(x: np.ndarray, stride: int) -> np.ndarray:
    if stride < 1:
        raise ValueError("upsample stride must be >= 1")
    if stride == 1:
        return x
    return x.repeat(stride, axis=2).repeat(stride, axis=3)


def concat_channels(*tensors: np.ndarray) -> np.ndarray:
    if len(tensors) == 1:
        return tensors[0]
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != first[0] or t.shape[2:] != first[2:]:
            raise ShapeError(f"concat: {t.shape} does not match {first} outside the channel axis")
    return np.concatenate(tensors, axis=1)


def add_elementwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b


def maxpool_geometry(size: int, stride: int, h: int, w: int) -> tuple[int, int, int, int, int]:
    """Darknet pooling: implicit padding size-1, window offset -(size-1)//2.

    Returns (oh, ow, offset, pad_after_h, pad_after_w).
    """
    pad = size - 1
    oh = (h + pad - size) // stride + 1
    ow = (w + pad - size) // stride + 1
    offset = pad // 2
    after_h = max(0, (oh - 1) * stride - offset + size - h)
    after_w = max(0, (ow - 1) * stride - offset + size - w)
    return oh, ow, offset, after_h, after_w


def maxpool2d(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    """Max pooling where window cells outside the input are ignored."""
    n, c, h, w = x.shape
    oh, ow, off, after_h, after_w = maxpool_geometry(size, stride, h, w)
    fill = -np.inf if np.issubdtype(x.dtype, np.floating) else np.iinfo(x.dtype).min
    padded = np.pad(x, ((0, 0), (0, 0), (off, after_h), (off, after_w)), constant_values=fill)
    win = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.max(axis=(4, 5)))


def batchnorm(x: np.ndarray, scales, mean, variance, biases, eps: float = BN_EPS) -> np.ndarray:
    inv = (scales / np.sqrt(variance.astype(np.float32) + np.float32(eps))).astype(np.float32)
    return ((x - mean[None, :, None, None]) * inv[None, :, None, None]
            + biases[None, :, None, None]).astype(np.float32)


def conv_layer(graph: NetworkGraph, store: WeightStore, index: int, x: np.ndarray) -> np.ndarray:
    """One convolutional layer incl. unfolded batch norm when the store still carries it."""
    layer = graph.layers[index]
    w = store[index]
    if w.batch_normalize:
        y = conv2d(x, w.kernels, None, layer.stride, layer.pad)
        y = batchnorm(y, w.scales, w.rolling_mean, w.rolling_variance, w.biases)
    else:
        y = conv2d(x, w.kernels, w.biases, layer.stride, layer.pad)
    return apply_activation(y, layer.activation)


def run_layers(graph: NetworkGraph, store: WeightStore, x: np.ndarray) -> list[np.ndarray]:
    """Float forward pass; returns every layer's output (a yolo layer returns its head)."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[1:] != graph.input_shape():
        raise ShapeError(f"input {x.shape} does not match network input {graph.input_shape()}")
    outs: list[np.ndarray] = []
    for layer in graph.layers:
        prev = outs[-1] if outs else x
        kind = layer.kind
        if kind == "convolutional":
            y = conv_layer(graph, store, layer.index, prev)
        elif kind == "maxpool":
            y = maxpool2d(prev, layer.size, layer.stride)
        elif kind == "upsample":
            y = upsample_nearest(prev, layer.stride)
        elif kind == "route":
            y = concat_channels(*(outs[s] for s in layer.sources))
        elif kind == "shortcut":
            y = apply_activation(add_elementwise(prev, outs[layer.sources[0]]), layer.activation)
        else:
            y = prev
        outs.append(y)
    return outs


def forward(graph: NetworkGraph, store: WeightStore, x: np.ndarray) -> list[np.ndarray]:
    """Raw yolo head tensors in layer order."""
    outs = run_layers(graph, store, x)
    return [outs[l.index] for l in graph.yolo_layers]
