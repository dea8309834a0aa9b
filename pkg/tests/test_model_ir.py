import logging
import re
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from berrydpu.model_ir import (
    ConfigError, ConvWeights, WeightStore, WeightsError, bundled_config, describe, fold_batchnorm, load_weights,
    parse_config, random_weights, save_weights, serialize_config,
)
from berrydpu.tensor_engine import batchnorm, conv2d

from conftest import random_cfg

MINIMAL = "[net]\nwidth=416\nheight=416\nchannels=3\n[convolutional]\nfilters=16\nsize=3\nstride=1\npad=1\nactivation=leaky\n"


def one_conv(bn: bool) -> str:
    return ("[net]\nwidth=8\nheight=8\nchannels=3\n[convolutional]\n"
            f"batch_normalize={int(bn)}\nfilters=16\nsize=3\nstride=1\npad=1\nactivation=leaky\n")


def header(major=0, minor=2, revision=0, seen=0):
    if major * 10 + minor >= 2:
        return struct.pack("<3iq", major, minor, revision, seen)
    return struct.pack("<4i", major, minor, revision, seen)


def test_minimal_config():
    g = parse_config(MINIMAL)
    assert len(g.layers) == 1
    assert g.layers[0].kind == "convolutional"
    assert g.input_shape() == (3, 416, 416)
    assert g.shapes[0] == (16, 416, 416)


def test_route_relative_resolution():
    text = "[net]\nwidth=8\nheight=8\nchannels=1\n" + "[convolutional]\nfilters=2\nsize=1\nactivation=linear\n" * 10
    text += "[route]\nlayers=-1,-4\n"
    g = parse_config(text)
    assert g.layers[10].sources == (9, 6)
    assert g.shapes[10] == (4, 8, 8)


def test_tiny_layer_count():
    text = bundled_config("yolov3-tiny").read_text()
    headers = re.findall(r"^\[(\w+)\]", text, flags=re.M)
    assert headers.count("yolo") == 2
    g = parse_config(text)
    assert len(g.layers) == len(headers) - 1 == 24
    assert [l.index for l in g.yolo_layers] == [16, 23]
    assert g.shapes[16] == (255, 13, 13)
    assert g.shapes[23] == (255, 26, 26)


def yolov3_full_cfg() -> str:
    """The standard Darknet-53 YOLOv3 layout, written out section by section."""
    parts = ["[net]\nwidth=416\nheight=416\nchannels=3\n"]

    def conv(filters, size=1, stride=1, act="leaky", bn=1):
        parts.append(f"[convolutional]\nbatch_normalize={bn}\nfilters={filters}\nsize={size}\nstride={stride}\n"
                     f"pad=1\nactivation={act}\n")

    def head(filters, mask):
        for _ in range(3):
            conv(filters)
            conv(filters * 2, 3)
        conv(255, act="linear", bn=0)
        parts.append(f"[yolo]\nmask={mask}\nanchors=10,13, 16,30, 33,23, 30,61, 62,45, 59,119, 116,90, 156,198, "
                     "373,326\nclasses=80\nnum=9\n")

    conv(32, 3)
    for filters, blocks in [(64, 1), (128, 2), (256, 8), (512, 8), (1024, 4)]:
        conv(filters, 3, 2)
        for _ in range(blocks):
            conv(filters // 2)
            conv(filters, 3)
            parts.append("[shortcut]\nfrom=-3\nactivation=linear\n")
    head(512, "6,7,8")
    for filters, skip, mask in [(256, 61, "3,4,5"), (128, 36, "0,1,2")]:
        parts.append("[route]\nlayers=-4\n")
        conv(filters)
        parts.append("[upsample]\nstride=2\n")
        parts.append(f"[route]\nlayers=-1, {skip}\n")
        head(filters, mask)
    return "".join(parts)


def test_full_yolov3_layout():
    g = parse_config(yolov3_full_cfg())
    assert len(g.layers) == 107
    assert [l.index for l in g.yolo_layers] == [82, 94, 106]
    assert [g.shapes[i] for i in (82, 94, 106)] == [(255, 13, 13), (255, 26, 26), (255, 52, 52)]
    assert g.layers[83].sources == (79,) and g.layers[86].sources == (85, 61)
    assert g.shapes[61] == (512, 26, 26) and g.shapes[36] == (256, 52, 52)
    # the published yolov3.weights is 248,007,048 bytes: a 20-byte header plus this many float32 values
    floats = 0
    for layer in g.conv_layers:
        c_in = g.shapes[layer.index - 1][0] if layer.index else 3
        floats += layer.filters * (4 if layer.batch_normalize else 1) + layer.filters * c_in * layer.size**2
    assert 20 + 4 * floats == 248_007_048


@pytest.mark.parametrize("text, line", [
    ("[convolutional]\nfilters=1\n", 1),
    ("[net]\nwidth=8\nheight=8\n[wat]\nx=1\n", 4),
    ("[net]\nwidth=8\nheight=8\n[convolutional]\nfilters=abc\nactivation=linear\n", 5),
    ("[net]\nwidth=8\nheight=8\n[convolutional]\nfilters=1\nactivation=linear\n[route]\nlayers=-3\n", 8),
    ("[net]\nwidth=8\nheight=8\n[convolutional]\nfilters=1\nactivation=linear\n[shortcut]\nfrom=1\n", 8),
])
def test_config_errors_name_line(text, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_unknown_key_warns(caplog):
    with caplog.at_level(logging.WARNING):
        parse_config(MINIMAL + "colour=blue\n")
    assert "colour" in caplog.text


@pytest.mark.parametrize("seed", range(30))
def test_serialize_round_trip(seed):
    g = parse_config(random_cfg(np.random.default_rng(seed)))
    again = parse_config(serialize_config(g))
    assert again == g
    assert again.shapes == g.shapes


def test_serialize_round_trip_tiny(tiny_graph):
    assert parse_config(serialize_config(tiny_graph)) == tiny_graph


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.data())
def test_forward_reference_rejected(seed, data):
    """Retarget one route/shortcut to itself or a later layer: always a parse error."""
    g = parse_config(random_cfg(np.random.default_rng(seed)))
    text = serialize_config(g)
    refs = [m for m in re.finditer(r"^(layers|from)=(.*)$", text, flags=re.M)]
    if not refs:
        return
    m = data.draw(st.sampled_from(refs))
    # index of the layer owning this key = number of section headers before it, minus [net]
    owner = len(re.findall(r"^\[", text[:m.start()], flags=re.M)) - 1
    bad = data.draw(st.integers(owner, owner + 5))
    text = text[:m.start(2)] + str(bad) + text[m.end(2):]
    with pytest.raises(ConfigError):
        parse_config(text)


def test_empty_payload():
    g = parse_config("[net]\nwidth=8\nheight=8\nchannels=3\n[maxpool]\nsize=2\nstride=2\n")
    store = load_weights(g, header())
    assert store.convs == {}


@pytest.mark.parametrize("bn, floats", [(True, 496), (False, 448)])
def test_float_counts(bn, floats):
    g = parse_config(one_conv(bn))
    blob = header() + np.arange(floats, dtype="<f4").tobytes()
    w = load_weights(g, blob)[0]
    assert w.kernels.shape == (16, 3, 3, 3)
    # Darknet order: biases, then bn triple, then kernels
    assert w.biases[0] == 0
    if bn:
        assert (w.scales[0], w.rolling_mean[0], w.rolling_variance[0]) == (16, 32, 48)
        assert w.kernels.flat[0] == 64
    else:
        assert w.kernels.flat[0] == 16
    for extra in (-1, 1):
        bad = header() + np.zeros(floats + extra, dtype="<f4").tobytes()
        with pytest.raises(WeightsError, match=f"{floats}.*{floats + extra}"):
            load_weights(g, bad)


def test_old_header_uses_int32_counter():
    g = parse_config(one_conv(False))
    payload = np.ones(448, dtype="<f4").tobytes()
    store = load_weights(g, header(0, 1, 0, 5) + payload)
    assert store.header == (0, 1, 0, 5)
    with pytest.raises(WeightsError):
        load_weights(g, header(0, 2, 0, 5)[:-4] + payload)


@pytest.mark.parametrize("seed", range(5))
def test_save_load_round_trip(seed):
    g = parse_config(random_cfg(np.random.default_rng(seed)))
    store = random_weights(g, np.random.default_rng(seed))
    blob = save_weights(store, g)
    back = load_weights(g, blob)
    assert save_weights(back, g) == blob
    for i, w in store.convs.items():
        np.testing.assert_array_equal(back[i].kernels, w.kernels)


def _bn_store(gamma, beta, mean, var, kernel):
    k = np.full((1, 1, 1, 1), kernel, np.float32)
    f32 = lambda v: np.array([v], np.float32)  # noqa: E731
    return WeightStore({0: ConvWeights(f32(beta), k, f32(gamma), f32(mean), f32(var))})


def test_fold_identity():
    eps = 1e-6
    w = fold_batchnorm(_bn_store(1.0, 0.0, 0.0, 1.0 - eps, 0.7), eps)[0]
    assert w.kernels.flat[0] == pytest.approx(0.7, rel=1e-7)
    assert w.biases[0] == pytest.approx(0.0, abs=1e-12)
    assert not w.batch_normalize


def test_fold_example():
    eps = 1e-6
    w = fold_batchnorm(_bn_store(2.0, 1.0, 3.0, 4.0 - eps, 0.5), eps)[0]
    assert w.kernels.flat[0] == pytest.approx(0.5, rel=1e-7)
    assert w.biases[0] == pytest.approx(-2.0, rel=1e-7)


def test_fold_negative_variance():
    with pytest.raises(WeightsError):
        fold_batchnorm(_bn_store(1.0, 0.0, 0.0, -0.5, 1.0))


@pytest.mark.parametrize("seed", range(10))
def test_fold_matches_conv_then_batchnorm(seed):
    rng = np.random.default_rng(seed)
    g = parse_config(one_conv(True))
    store = random_weights(g, rng)
    x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
    w = store[0]
    ref = batchnorm(conv2d(x, w.kernels, None, 1, True), w.scales, w.rolling_mean, w.rolling_variance, w.biases)
    f = fold_batchnorm(store)[0]
    got = conv2d(x, f.kernels, f.biases, 1, True)
    assert np.max(np.abs(got - ref)) <= 1e-5 * np.max(np.abs(ref))


def test_fold_idempotent():
    g = parse_config(one_conv(True))
    once = fold_batchnorm(random_weights(g, np.random.default_rng(0)))
    twice = fold_batchnorm(once)
    np.testing.assert_array_equal(once[0].kernels, twice[0].kernels)
    np.testing.assert_array_equal(once[0].biases, twice[0].biases)


def test_describe_rows(tiny_graph):
    rows = list(describe(tiny_graph))
    assert len(rows) == 24
    assert rows[0][3] == (16, 416, 416)
    assert rows[0][4] == 16 * 3 * 9 + 4 * 16
