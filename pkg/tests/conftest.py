from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

from berrydpu.model_ir import bundled_config, load_config, parse_config, random_weights, read_weights
from berrydpu.quantizer import calibrate, quantize_network

DATA = Path(__file__).parent / "data"
EVAL_DIR = DATA / "strawberries"
CALIB_DIR = DATA / "calib"
FRAMES_DIR = DATA / "frames"
FIXTURE_WEIGHTS = DATA / "strawberry-tiny.weights"


def random_cfg(rng: np.random.Generator, max_layers: int = 10) -> str:
    """Random small but valid cfg: a conv trunk with pools, upsamples,
    routes and shortcuts, ending in one or two yolo heads."""
    size = int(rng.choice([8, 12, 16]))
    channels = int(rng.integers(1, 4))
    lines = [f"[net]\nwidth={size}\nheight={size}\nchannels={channels}\n"]
    shapes: list[tuple[int, int, int]] = []
    cur = (channels, size, size)
    heads = int(rng.integers(1, 3))
    classes = int(rng.integers(1, 3))
    anchors = "2,3, 4,5, 6,7"

    def conv(filters, k=None, stride=1, act=None, bn=None):
        nonlocal cur
        k = k if k is not None else int(rng.choice([1, 3]))
        pad = int(rng.integers(0, 2)) if k > 1 else 0
        if k > 1 and not pad and cur[1] < k + 1:
            pad = 1
        act = act or str(rng.choice(["linear", "leaky", "relu", "relu6"]))
        bn = int(rng.integers(0, 2)) if bn is None else bn
        lines.append(f"[convolutional]\nbatch_normalize={bn}\nfilters={filters}\nsize={k}\nstride={stride}\n"
                     f"pad={pad}\nactivation={act}\n")
        p = k // 2 if pad else 0
        h = (cur[1] + 2 * p - k) // stride + 1
        w = (cur[2] + 2 * p - k) // stride + 1
        cur = (filters, h, w)
        shapes.append(cur)

    def head():
        mask = int(rng.integers(0, 3))
        conv(1 * (5 + classes), k=1, act="linear", bn=0)
        lines.append(f"[yolo]\nmask={mask}\nanchors={anchors}\nclasses={classes}\nnum=3\n")
        shapes.append(cur)

    conv(int(rng.integers(2, 6)), k=3)
    for _ in range(int(rng.integers(1, max_layers))):
        i = len(shapes)
        choice = rng.choice(["conv", "conv", "pool", "up", "route", "shortcut"])
        if choice == "conv":
            stride = 2 if cur[1] >= 6 and rng.random() < 0.3 else 1
            conv(int(rng.integers(1, 6)), stride=stride)
        elif choice == "pool":
            if cur[1] >= 4 and rng.random() < 0.5:
                lines.append("[maxpool]\nsize=2\nstride=2\n")
                cur = (cur[0], (cur[1] + 1 - 2) // 2 + 1, (cur[2] + 1 - 2) // 2 + 1)
            else:
                size_ = int(rng.choice([2, 3]))
                lines.append(f"[maxpool]\nsize={size_}\nstride=1\n")
            shapes.append(cur)
        elif choice == "up":
            if cur[1] > 16:
                continue
            lines.append("[upsample]\nstride=2\n")
            cur = (cur[0], cur[1] * 2, cur[2] * 2)
            shapes.append(cur)
        elif choice == "route":
            same = [j for j, s in enumerate(shapes) if s[1:] == cur[1:] and "[yolo]" not in lines[j + 1]]
            picks = sorted(set(int(j) for j in rng.choice(same, size=min(len(same), int(rng.integers(1, 3))),
                                                            replace=False)))
            refs = [j - i if rng.random() < 0.5 else j for j in picks]
            lines.append("[route]\nlayers=" + ",".join(str(r) for r in refs) + "\n")
            cur = (sum(shapes[j][0] for j in picks), cur[1], cur[2])
            shapes.append(cur)
        else:
            same = [j for j, s in enumerate(shapes[:-1]) if s == cur and "[yolo]" not in lines[j + 1]]
            if not same:
                continue
            j = int(rng.choice(same))
            act = str(rng.choice(["linear", "leaky"]))
            lines.append(f"[shortcut]\nfrom={j - i}\nactivation={act}\n")
            shapes.append(cur)
        if heads == 2 and len(shapes) > 3 and rng.random() < 0.2:
            head()
            heads = 1
    head()
    return "\n".join(lines)


def random_graph(seed: int, max_layers: int = 10):
    return parse_config(random_cfg(np.random.default_rng(seed), max_layers))


def quantized_random(graph, seed: int, n_calib: int = 2):
    rng = np.random.default_rng(seed)
    store = random_weights(graph, rng)
    calib = [rng.uniform(0, 1, (1, *graph.input_shape())).astype(np.float32) for _ in range(n_calib)]
    table = calibrate(graph, store, calib)
    return store, quantize_network(graph, store, table)


@pytest.fixture(scope="session")
def tiny_graph():
    return load_config(bundled_config("yolov3-tiny"))


@pytest.fixture(scope="session")
def strawberry_graph():
    return load_config(bundled_config("strawberry-tiny"))


@pytest.fixture(scope="session")
def strawberry_store(strawberry_graph):
    if not FIXTURE_WEIGHTS.exists():
        pytest.skip("fixture weights not built (scripts/train_fixture_model.py)")
    return read_weights(strawberry_graph, FIXTURE_WEIGHTS)


@pytest.fixture(scope="session")
def strawberry_quant(strawberry_graph, strawberry_store):
    from berrydpu.detector import letterbox, load_image
    from berrydpu.evaluation import list_images

    calib = [letterbox(load_image(p))[0] for p in list_images(CALIB_DIR)]
    return quantize_network(strawberry_graph, strawberry_store, calibrate(strawberry_graph, strawberry_store, calib))


@pytest.fixture(scope="session")
def quant_container(tmp_path_factory, strawberry_store):
    """Container built through the CLI, as a user would."""
    from berrydpu.cli import main

    out = tmp_path_factory.mktemp("model") / "strawberry.bqnt"
    assert main(["quantize", "--cfg", str(bundled_config("strawberry-tiny")), "--weights", str(FIXTURE_WEIGHTS),
                 "--calib", str(CALIB_DIR), "--output", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def zero_head_weights(tmp_path_factory, strawberry_graph):
    """Random trunk, all-zero head convolutions: every head logit is exactly 0."""
    from berrydpu.model_ir import ConvWeights, WeightStore, save_weights

    store = random_weights(strawberry_graph, np.random.default_rng(0))
    convs = dict(store.convs)
    for layer in strawberry_graph.yolo_layers:
        w = convs[layer.index - 1]
        convs[layer.index - 1] = ConvWeights(np.zeros_like(w.biases), np.zeros_like(w.kernels))
    path = tmp_path_factory.mktemp("weights") / "zero-head.weights"
    path.write_bytes(save_weights(WeightStore(convs), strawberry_graph))
    return path


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, whatever the verbosity."""
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, status, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2} {status:<4} {title}: {detail}")
