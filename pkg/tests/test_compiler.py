from pathlib import Path

import numpy as np
import pytest

import oracles
from berrydpu.compiler import (
    CompileError, check_buffer_safety, compile_graph, dump_program, execute, interpret, interpreter_peak_bytes,
)
from berrydpu.model_ir import ConvWeights, WeightStore, parse_config, random_weights
from berrydpu.quantizer import QuantTable, calibrate, quantize_network, quantize_tensor

from conftest import DATA, quantized_random, random_graph

GOLDEN = DATA / "yolov3-tiny.float32.lst"

HEAD = "[yolo]\nmask=0\nanchors=2,3\nclasses=1\n"


def chain(n: int) -> str:
    convs = "[convolutional]\nfilters=6\nsize=3\npad=1\nactivation=leaky\n" * n
    return "[net]\nwidth=8\nheight=8\nchannels=3\n" + convs + HEAD


def value_intervals(program):
    """(produced at, last read at) for every arena value, straight from the instruction stream."""
    born, last = {}, {}
    for t, ins in enumerate(program.instructions):
        for v in ins.sources:
            last[v] = t
        if ins.opcode == "LOAD_INPUT":
            born[-1] = t
        elif ins.opcode != "YOLO_OUTPUT":
            born[ins.layer] = t
    return [(born[v], last.get(v, born[v])) for v in born]


def test_single_conv_program():
    g = parse_config("[net]\nwidth=4\nheight=4\nchannels=3\n[convolutional]\nfilters=6\nsize=1\n"
                     "activation=linear\n" + HEAD)
    p = compile_graph(g)
    assert [i.opcode for i in p.instructions] == ["LOAD_INPUT", "CONV", "YOLO_OUTPUT"]


def test_graph_without_head_rejected():
    g = parse_config("[net]\nwidth=4\nheight=4\nchannels=3\n[convolutional]\nfilters=6\nsize=1\n"
                     "activation=linear\n")
    with pytest.raises(CompileError):
        compile_graph(g)


def test_route_operands_live():
    text = "[net]\nwidth=8\nheight=8\nchannels=1\n" + "[convolutional]\nfilters=3\nsize=1\nactivation=leaky\n" * 10
    text += "[route]\nlayers=-1,-4\n[convolutional]\nfilters=6\nsize=1\nactivation=linear\n" + HEAD
    g = parse_config(text)
    p = compile_graph(g)
    by_layer = {ins.layer: ins for ins in p.instructions if ins.opcode != "LOAD_INPUT"}
    concat = by_layer[10]
    assert concat.opcode == "CONCAT" and concat.sources == (9, 6)
    assert concat.inputs == (by_layer[9].output, by_layer[6].output)
    assert len(set(concat.inputs)) == 2
    assert check_buffer_safety(p) == []


@pytest.mark.parametrize("n", [1, 2, 5, 12])
def test_chain_peak_is_two(n):
    p = compile_graph(parse_config(chain(n)))
    assert p.peak_live_buffers == 2
    assert oracles.peak_overlap(value_intervals(p)) == 2
    assert len(p.buffers) == 2


@pytest.mark.parametrize("seed", range(40))
def test_liveness_matches_interval_oracle(seed):
    p = compile_graph(random_graph(seed))
    assert p.peak_live_buffers == oracles.peak_overlap(value_intervals(p))
    assert check_buffer_safety(p) == []
    assert p.peak_live_bytes <= interpreter_peak_bytes(random_graph(seed))


def test_program_invariants(tiny_graph):
    p = compile_graph(tiny_graph)
    ops = [i.opcode for i in p.instructions]
    assert ops.count("LOAD_INPUT") == 1 and ops[0] == "LOAD_INPUT"
    assert ops.count("YOLO_OUTPUT") == 2
    written = set()
    for ins in p.instructions:
        assert set(ins.inputs) <= written
        if ins.opcode != "YOLO_OUTPUT":
            written.add(ins.output)
    assert max(c for c, _ in p.live_profile()) == p.peak_live_buffers
    assert p.peak_live_bytes <= interpreter_peak_bytes(tiny_graph)
    assert p.arena_bytes < interpreter_peak_bytes(tiny_graph)


def test_golden_listing(tiny_graph):
    listing = dump_program(compile_graph(tiny_graph))
    assert listing == GOLDEN.read_text()
    assert dump_program(compile_graph(tiny_graph)) == listing


def test_int8_requires_table(tiny_graph):
    with pytest.raises(CompileError, match="table"):
        compile_graph(tiny_graph, "int8")
    g = random_graph(3)
    _, qm = quantized_random(g, 3)
    partial = QuantTable(qm.table.input_f, {k: v for k, v in qm.table.layers.items() if k != 1})
    with pytest.raises(CompileError, match="layer 1"):
        compile_graph(g, "int8", partial)


def identity_graph():
    g = parse_config("[net]\nwidth=5\nheight=5\nchannels=6\n[convolutional]\nfilters=6\nsize=1\n"
                     "activation=linear\n" + HEAD)
    store = WeightStore({0: ConvWeights(np.zeros(6, np.float32), np.eye(6, dtype=np.float32).reshape(6, 6, 1, 1))})
    return g, store


def test_identity_program_float():
    g, store = identity_graph()
    x = np.random.default_rng(0).normal(size=(1, 6, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(execute(compile_graph(g, weights=store), x)[0], x)


def test_identity_program_int8():
    g, store = identity_graph()
    x = np.random.default_rng(0).uniform(-1, 1, size=(1, 6, 5, 5)).astype(np.float32)
    qm = quantize_network(g, store, calibrate(g, store, [x]))
    out = execute(compile_graph(g, "int8", weights=qm), x)[0]
    np.testing.assert_array_equal(out, quantize_tensor(x, qm.table.input_f))


@pytest.mark.parametrize("seed", range(30))
def test_float_equivalence(seed):
    g = random_graph(seed)
    store = random_weights(g, np.random.default_rng(seed))
    x = np.random.default_rng(seed + 1).uniform(0, 1, (1, *g.input_shape())).astype(np.float32)
    got = execute(compile_graph(g, weights=store), x)
    ref = interpret(g, store, x)
    for a, b in zip(got, ref):
        assert np.max(np.abs(a - b)) <= 1e-5 * max(np.max(np.abs(b)), 1e-30)


@pytest.mark.parametrize("seed", range(30))
def test_int8_equivalence_and_determinism(seed):
    g = random_graph(seed)
    _, qm = quantized_random(g, seed)
    x = np.random.default_rng(seed + 1).uniform(0, 1, (1, *g.input_shape())).astype(np.float32)
    p = compile_graph(g, "int8", weights=qm)
    first = execute(p, x)
    for a, b, c in zip(first, interpret(g, qm, x, "int8"), execute(p, x)):
        assert a.dtype == np.int8
        assert a.tobytes() == b.tobytes() == c.tobytes()


def test_execute_checks_input_shape(tiny_graph):
    p = compile_graph(tiny_graph, weights=random_weights(tiny_graph, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        execute(p, np.zeros((1, 3, 10, 10), np.float32))


def test_execute_needs_weights(tiny_graph):
    with pytest.raises(CompileError):
        execute(compile_graph(tiny_graph), np.zeros((1, 3, 416, 416), np.float32))


if __name__ == "__main__":
    # regenerate the golden listing after an intentional format change
    from berrydpu.model_ir import bundled_config, load_config

    Path(GOLDEN).write_text(dump_program(compile_graph(load_config(bundled_config("yolov3-tiny")))))
