import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from berrydpu.model_ir import parse_config, random_weights
from berrydpu.tensor_engine import (
    ShapeError, add_elementwise, apply_activation, concat_channels, conv2d, maxpool2d, run_layers,
    upsample_nearest,
)

from conftest import random_cfg


def rel_err(got, ref):
    """Max abs error normalised by the largest reference magnitude."""
    scale = max(float(np.max(np.abs(ref))), 1e-30)
    return float(np.max(np.abs(got.astype(np.float64) - ref))) / scale


def test_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 4, 5, 5)).astype(np.float32)
    k = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
    np.testing.assert_array_equal(conv2d(x, k, np.zeros(4, np.float32)), x)


def test_ones_kernel_border_counts():
    out = conv2d(np.ones((1, 3, 3, 3), np.float32), np.ones((1, 3, 3, 3), np.float32), None, 1, True)
    # per channel 4/6/9, times 3 channels
    np.testing.assert_array_equal(out[0, 0] / 3, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_stride_two_geometry():
    out = conv2d(np.zeros((1, 1, 416, 416), np.float32), np.zeros((2, 1, 3, 3), np.float32), None, 2, True)
    assert out.shape == (1, 2, 208, 208)


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 3, 4, 4), np.float32), np.zeros((2, 2, 3, 3), np.float32), None)


@pytest.mark.parametrize("seed", range(25))
def test_conv_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    c, f, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 3]))
    h, w = rng.integers(k, 8, size=2)
    stride, pad = int(rng.integers(1, 3)), bool(rng.integers(0, 2))
    x = rng.normal(size=(1, c, h, w)).astype(np.float32)
    kern = rng.normal(size=(f, c, k, k)).astype(np.float32)
    bias = rng.normal(size=f).astype(np.float32)
    assert rel_err(conv2d(x, kern, bias, stride, pad), oracles.conv2d(x, kern, bias, stride, pad)) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-8, 8).filter(lambda a: abs(a) > 1e-3))
def test_conv_linear_in_input(seed, alpha):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
    kern = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    a = np.float32(alpha)
    lhs = conv2d(a * x, kern, None, 1, True)
    rhs = a * conv2d(x, kern, None, 1, True)
    assert rel_err(lhs, rhs.astype(np.float64)) <= 1e-5


def test_activation_examples():
    x = np.array([2, 0, -2, 7, -1], np.float32)
    np.testing.assert_allclose(apply_activation(x, "leaky"), [2, 0, -0.2, 7, -0.1], rtol=1e-7)
    np.testing.assert_array_equal(apply_activation(x, "relu6"), [2, 0, 0, 6, 0])
    np.testing.assert_array_equal(apply_activation(x, "relu"), [2, 0, 0, 7, 0])
    np.testing.assert_array_equal(apply_activation(x, "linear"), x)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.integers(1, 40), elements=st.floats(-100, 100, width=32)),
       st.sampled_from(["linear", "leaky", "relu", "relu6"]))
def test_activation_matches_oracle(x, kind):
    np.testing.assert_array_equal(apply_activation(x, kind), oracles.activation(x, kind))


def test_upsample_examples():
    x = np.random.default_rng(1).normal(size=(1, 2, 13, 13)).astype(np.float32)
    np.testing.assert_array_equal(upsample_nearest(x, 1), x)
    up = upsample_nearest(x, 2)
    assert up.shape == (1, 2, 26, 26)
    np.testing.assert_array_equal(up, oracles.upsample(x, 2))


def test_concat_examples():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(1, 16, 3, 3)).astype(np.float32)
    b = rng.normal(size=(1, 32, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(concat_channels(a), a)
    out = concat_channels(a, b)
    assert out.shape[1] == 48
    np.testing.assert_array_equal(out, oracles.concat(a, b))
    with pytest.raises(ShapeError):
        concat_channels(a, np.zeros((1, 2, 4, 4), np.float32))


def test_add_examples():
    a = np.random.default_rng(3).normal(size=(1, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(add_elementwise(a, np.zeros_like(a)), a)
    np.testing.assert_array_equal(add_elementwise(a, -a), np.zeros_like(a))
    with pytest.raises(ShapeError):
        add_elementwise(a, a[:, :2])


def test_maxpool_examples():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    assert maxpool2d(x, 2, 2).item() == 4
    const = np.full((1, 2, 5, 5), 3.5, np.float32)
    np.testing.assert_array_equal(maxpool2d(const, 2, 2), np.full((1, 2, 3, 3), 3.5, np.float32))
    assert maxpool2d(np.zeros((1, 1, 13, 13), np.float32), 2, 1).shape == (1, 1, 13, 13)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(2, 2), (2, 1), (3, 1), (3, 2)]))
def test_maxpool_matches_oracle(seed, geom):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 9, size=2)
    x = rng.normal(size=(1, 2, h, w)).astype(np.float32)
    np.testing.assert_array_equal(maxpool2d(x, *geom), oracles.maxpool(x, *geom))


def test_maxpool_int8_edges():
    """Padding must never win, even against the smallest int8 value."""
    x = np.full((1, 1, 3, 3), -128, np.int8)
    np.testing.assert_array_equal(maxpool2d(x, 2, 1), x)


@pytest.mark.parametrize("seed", range(10))
def test_shape_propagation_matches_execution(seed):
    g = parse_config(random_cfg(np.random.default_rng(seed)))
    outs = run_layers(g, random_weights(g, np.random.default_rng(seed)),
                      np.zeros((1, *g.input_shape()), np.float32))
    assert [o.shape[1:] for o in outs] == list(g.shapes)
