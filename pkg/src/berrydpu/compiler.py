"""Lowering of a network graph to a linear DPU-style instruction stream.

Every layer becomes one instruction in layer order (conv and its activation
share a CONV). Layer outputs are placed in a small pool of arena buffers by
linear scan over liveness intervals, so a buffer is recycled as soon as the
last reader of its current value has executed. YOLO heads leave the arena
through YOLO_OUTPUT into host-side output slots and are decoded on the host.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import quantizer as qz
from .model_ir import NetworkGraph, WeightStore, fold_batchnorm
from .tensor_engine import (
    ShapeError, add_elementwise, apply_activation, concat_channels, conv2d,
    maxpool2d, run_layers, upsample_nearest,
)

OPCODES = ("LOAD_INPUT", "CONV", "ADD", "CONCAT", "UPSAMPLE", "MAXPOOL", "YOLO_OUTPUT")
_OPCODE_OF = {
    "convolutional": "CONV",
    "shortcut": "ADD",
    "route": "CONCAT",
    "upsample": "UPSAMPLE",
    "maxpool": "MAXPOOL",
    "yolo": "YOLO_OUTPUT",
}
INPUT_VALUE = -1
ELEMENT_BYTES = {"float32": 4, "int8": 1}


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class Instruction:
    opcode: str
    layer: int
    inputs: tuple[int, ...]
    # values (producing layer, or -1 for the network input) expected in ``inputs``
    sources: tuple[int, ...]
    # arena buffer id; for YOLO_OUTPUT the host output slot
    output: int
    shape: tuple[int, int, int]
    params: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Assignment:
    value: int
    shape: tuple[int, int, int]
    start: int
    end: int


@dataclass
class BufferInfo:
    id: int
    element_kind: str
    nbytes: int = 0
    assignments: list[Assignment] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Shape of the largest value this buffer ever holds."""
        return max(self.assignments, key=lambda a: int(np.prod(a.shape))).shape

    @property
    def interval(self) -> tuple[int, int]:
        return self.assignments[0].start, max(a.end for a in self.assignments)


@dataclass(frozen=True)
class Program:
    mode: str
    input_shape: tuple[int, int, int]
    instructions: tuple[Instruction, ...]
    buffers: dict[int, BufferInfo]
    output_fraction_bits: tuple[int, ...] = ()
    weights: Any = None

    @property
    def element_kind(self) -> str:
        return self.mode

    @property
    def arena_bytes(self) -> int:
        return sum(b.nbytes for b in self.buffers.values())

    def live_profile(self) -> list[tuple[int, int]]:
        """Per instruction: (occupied buffers, live value bytes), outputs included."""
        per_elem = ELEMENT_BYTES[self.mode]
        profile = []
        for t in range(len(self.instructions)):
            count = nbytes = 0
            for b in self.buffers.values():
                for a in b.assignments:
                    if a.start <= t <= a.end:
                        count += 1
                        nbytes += int(np.prod(a.shape)) * per_elem
            profile.append((count, nbytes))
        return profile

    @property
    def peak_live_buffers(self) -> int:
        return max(c for c, _ in self.live_profile())

    @property
    def peak_live_bytes(self) -> int:
        return max(b for _, b in self.live_profile())


def _value_of(graph: NetworkGraph) -> list[int]:
    """Value id actually holding each layer's output (yolo layers alias their input)."""
    values = []
    for layer in graph.layers:
        if layer.kind == "yolo":
            values.append(values[-1] if layer.index else INPUT_VALUE)
        else:
            values.append(layer.index)
    return values


def compile_graph(graph: NetworkGraph, mode: str = "float32", table: qz.QuantTable | None = None,
                  weights: Any = None) -> Program:
    """Lower ``graph`` to a Program.

    ``weights`` is optional (a listing needs none): a WeightStore for
    float32 mode (folded here), a QuantizedModel for int8 mode. In int8
    mode the table defaults to the quantized model's table.
    """
    if mode not in ELEMENT_BYTES:
        raise CompileError(f"unknown mode {mode!r}")
    if not graph.yolo_layers:
        raise CompileError("graph has no yolo layer, so the program would have no outputs")
    if mode == "int8":
        if table is None and isinstance(weights, qz.QuantizedModel):
            table = weights.table
        if table is None:
            raise CompileError("int8 mode requires a quantization table")
        for layer in graph.layers:
            q = table.layers.get(layer.index)
            if q is None or (layer.kind == "convolutional" and q.f_weights is None):
                raise CompileError(f"layer {layer.index} ({layer.kind}): missing quantization entry")
    elif isinstance(weights, WeightStore):
        weights = fold_batchnorm(weights)

    value_of = _value_of(graph)
    shape_of = {INPUT_VALUE: graph.input_shape()}
    f_of = {INPUT_VALUE: table.input_f} if table is not None else {}

    # instruction skeletons: (opcode, layer, source values, produced value or None, params)
    plan = [("LOAD_INPUT", INPUT_VALUE, (), INPUT_VALUE, {"f": table.input_f} if table else {})]
    for layer in graph.layers:
        i = layer.index
        prev = value_of[i - 1] if i else INPUT_VALUE
        op = _OPCODE_OF[layer.kind]
        params: dict[str, Any] = {}
        q = table[i] if table is not None else None
        if op == "CONV":
            srcs = (prev,)
            params = {"filters": layer.filters, "size": layer.size, "stride": layer.stride,
                      "pad": layer.padding, "activation": layer.activation}
            if q is not None:
                if not -31 <= q.shift <= 31:
                    raise CompileError(f"layer {i}: requantization shift {q.shift} outside [-31, 31]")
                params.update(f_in=f_of[prev], f_w=q.f_weights, f_out=q.f_out)
        elif op == "ADD":
            srcs = (prev, value_of[layer.sources[0]])
            params = {"activation": layer.activation}
            if q is not None:
                params.update(f_a=f_of[srcs[0]], f_b=f_of[srcs[1]], f_out=q.f_out)
        elif op == "CONCAT":
            srcs = tuple(value_of[s] for s in layer.sources)
            if q is not None:
                params.update(f_srcs=[f_of[s] for s in srcs], f_out=q.f_out)
        elif op == "UPSAMPLE":
            srcs = (prev,)
            params = {"stride": layer.stride}
        elif op == "MAXPOOL":
            srcs = (prev,)
            params = {"size": layer.size, "stride": layer.stride}
        else:
            srcs = (prev,)
            params = {"anchors": [list(layer.anchors[m]) for m in layer.mask], "classes": layer.classes}
            if q is not None:
                params["f"] = f_of[prev]
        produced = None if op == "YOLO_OUTPUT" else i
        if produced is not None:
            shape_of[i] = graph.shapes[i]
            if table is not None:
                f_of[i] = f_of[prev] if op in ("MAXPOOL", "UPSAMPLE") else q.f_out
        plan.append((op, i, srcs, produced, params))

    last_use = {v: t for t, (_, _, _, v, _) in enumerate(plan) if v is not None}
    for t, (_, _, srcs, _, _) in enumerate(plan):
        for v in srcs:
            if v not in last_use:
                raise CompileError(f"instruction {t} reads value {v} before it is produced")
            last_use[v] = max(last_use[v], t)

    per_elem = ELEMENT_BYTES[mode]
    buffers: dict[int, BufferInfo] = {}
    holder: dict[int, int] = {}  # buffer id -> value currently held
    location: dict[int, int] = {}  # value -> buffer id
    instructions = []
    slot = 0
    for t, (op, layer_idx, srcs, produced, params) in enumerate(plan):
        inputs = tuple(location[v] for v in srcs)
        if produced is None:
            instructions.append(Instruction(op, layer_idx, inputs, srcs, slot, shape_of[srcs[0]], params))
            slot += 1
            continue
        need = int(np.prod(shape_of[produced])) * per_elem
        free = [b for b, v in holder.items() if last_use[v] < t]
        if free:
            fitting = [b for b in free if buffers[b].nbytes >= need]
            if fitting:
                buf = min(fitting, key=lambda b: (buffers[b].nbytes, b))
            else:
                buf = max(free, key=lambda b: (buffers[b].nbytes, -b))
                buffers[buf].nbytes = need
        else:
            buf = len(buffers)
            buffers[buf] = BufferInfo(buf, mode, need)
        buffers[buf].assignments.append(Assignment(produced, shape_of[produced], t, last_use[produced]))
        holder[buf] = produced
        location[produced] = buf
        instructions.append(Instruction(op, layer_idx, inputs, srcs, buf, shape_of[produced], params))

    if sum(1 for ins in instructions if ins.opcode == "LOAD_INPUT") != 1 or slot == 0:
        raise CompileError("program must have one LOAD_INPUT and at least one YOLO_OUTPUT")
    out_f = tuple(ins.params["f"] for ins in instructions if ins.opcode == "YOLO_OUTPUT") if table else ()
    return Program(mode, graph.input_shape(), tuple(instructions), buffers, out_f, weights)


def execute(program: Program, x: np.ndarray, weights: Any = None) -> list[np.ndarray]:
    """Run the instruction stream on its own buffer arena; returns raw heads in layer order.

    int8 programs return int8 heads (fraction bits in ``program.output_fraction_bits``).
    Float input to an int8 program is quantized by LOAD_INPUT.
    """
    weights = weights if weights is not None else program.weights
    if weights is None:
        raise CompileError("program has no bound weights")
    if program.mode == "float32" and isinstance(weights, WeightStore):
        weights = fold_batchnorm(weights)
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != program.input_shape:
        raise ShapeError(f"input {x.shape} does not match program input {program.input_shape}")
    int_mode = program.mode == "int8"
    arena: dict[int, np.ndarray] = {}
    outputs: list[np.ndarray] = []
    for ins in program.instructions:
        args = [arena[b] for b in ins.inputs]
        p = ins.params
        op = ins.opcode
        if op == "LOAD_INPUT":
            if int_mode:
                y = x.astype(np.int8) if x.dtype == np.int8 else qz.quantize_tensor(x, p["f"])
            else:
                y = x.astype(np.float32)
        elif op == "CONV":
            if int_mode:
                y = qz.qconv2d(args[0], weights.kernels[ins.layer], weights.biases[ins.layer],
                               qz.LayerQuant(p["f_in"], p["f_out"], p["f_w"], p["f_in"] + p["f_w"]),
                               p["stride"], p["pad"] > 0, p["activation"])
            else:
                w = weights[ins.layer]
                y = apply_activation(conv2d(args[0], w.kernels, w.biases, p["stride"], p["pad"] > 0),
                                     p["activation"])
        elif op == "ADD":
            if int_mode:
                y = qz.qadd(args[0], p["f_a"], args[1], p["f_b"], p["f_out"], p["activation"])
            else:
                y = apply_activation(add_elementwise(args[0], args[1]), p["activation"])
        elif op == "CONCAT":
            y = qz.qconcat(list(zip(args, p["f_srcs"])), p["f_out"]) if int_mode else concat_channels(*args)
        elif op == "UPSAMPLE":
            y = upsample_nearest(args[0], p["stride"])
        elif op == "MAXPOOL":
            y = maxpool2d(args[0], p["size"], p["stride"])
        else:
            outputs.append(args[0].copy())
            continue
        arena[ins.output] = y
    return outputs


def interpret(graph: NetworkGraph, weights: Any, x: np.ndarray, mode: str = "float32") -> list[np.ndarray]:
    """Reference evaluation straight off the graph, one live tensor per layer."""
    if mode == "float32":
        outs = run_layers(graph, weights, x)
        return [outs[l.index] for l in graph.yolo_layers]
    if mode != "int8":
        raise CompileError(f"unknown mode {mode!r}")
    model: qz.QuantizedModel = weights
    table = model.table
    x = np.asarray(x)
    q_x = x.astype(np.int8) if x.dtype == np.int8 else qz.quantize_tensor(x, table.input_f)
    outs: list[np.ndarray] = []
    fs: list[int] = []
    for layer in graph.layers:
        i = layer.index
        prev, f_prev = (outs[-1], fs[-1]) if i else (q_x, table.input_f)
        q = table[i]
        if layer.kind == "convolutional":
            y = qz.qconv2d(prev, model.kernels[i], model.biases[i], qz.LayerQuant(f_prev, q.f_out, q.f_weights, f_prev + q.f_weights),
                           layer.stride, layer.pad, layer.activation)
            f = q.f_out
        elif layer.kind == "shortcut":
            s = layer.sources[0]
            y = qz.qadd(prev, f_prev, outs[s], fs[s], q.f_out, layer.activation)
            f = q.f_out
        elif layer.kind == "route":
            y = qz.qconcat([(outs[s], fs[s]) for s in layer.sources], q.f_out)
            f = q.f_out
        elif layer.kind == "upsample":
            y, f = upsample_nearest(prev, layer.stride), f_prev
        elif layer.kind == "maxpool":
            y, f = maxpool2d(prev, layer.size, layer.stride), f_prev
        else:
            y, f = prev, f_prev
        outs.append(y)
        fs.append(f)
    return [outs[l.index] for l in graph.yolo_layers]


def interpreter_peak_bytes(graph: NetworkGraph, mode: str = "float32") -> int:
    """Memory of the interpreter, which keeps every layer output alive."""
    shapes = [graph.input_shape()] + [s for l, s in zip(graph.layers, graph.shapes) if l.kind != "yolo"]
    return sum(int(np.prod(s)) for s in shapes) * ELEMENT_BYTES[mode]


def check_buffer_safety(program: Program) -> list[str]:
    """Replay the stream symbolically and report reads of clobbered buffers
    and writes over values that still have pending readers."""
    violations = []
    pending: dict[int, int] = {}
    for ins in program.instructions:
        for v in ins.sources:
            pending[v] = pending.get(v, 0) + 1
    contents: dict[int, int] = {}
    for t, ins in enumerate(program.instructions):
        for buf, v in zip(ins.inputs, ins.sources):
            if contents.get(buf) != v:
                violations.append(f"instruction {t} ({ins.opcode}) reads value {v} from buffer {buf}, "
                                  f"which holds {contents.get(buf)}")
            pending[v] -= 1
        if ins.opcode == "YOLO_OUTPUT":
            continue
        current = contents.get(ins.output)
        if current is not None and pending.get(current, 0) > 0:
            violations.append(f"instruction {t} ({ins.opcode}) overwrites value {current} in buffer "
                              f"{ins.output} with {pending[current]} reads pending")
        contents[ins.output] = ins.layer if ins.opcode != "LOAD_INPUT" else INPUT_VALUE
    return violations


def _fmt_shape(shape) -> str:
    return "x".join(str(d) for d in shape)


def dump_program(program: Program) -> str:
    """Human-readable listing, one instruction per line."""
    lines = [
        f"; mode={program.mode} input={_fmt_shape(program.input_shape)} "
        f"instructions={len(program.instructions)} buffers={len(program.buffers)} "
        f"arena_bytes={program.arena_bytes} peak_live_bytes={program.peak_live_bytes}"
    ]
    for t, ins in enumerate(program.instructions):
        ins_str = ",".join(f"b{b}" for b in ins.inputs)
        out = f"out{ins.output}" if ins.opcode == "YOLO_OUTPUT" else f"b{ins.output}"
        layer = f"L{ins.layer}" if ins.layer >= 0 else "-"
        extra = " ".join(f"{k}={_fmt_param(v)}" for k, v in ins.params.items())
        lines.append(f"{t:04d} {ins.opcode:<11} {layer:<4} in=[{ins_str}] {out} {_fmt_shape(ins.shape)} {extra}".rstrip())
    for b in program.buffers.values():
        lo, hi = b.interval
        lines.append(f"; b{b.id} {b.element_kind} {b.nbytes} bytes live [{lo},{hi}] values="
                     + ",".join(str(a.value) for a in b.assignments))
    return "\n".join(lines) + "\n"


def _fmt_param(v) -> str:
    if isinstance(v, list):
        return "[" + ",".join(_fmt_param(e) for e in v) + "]"
    return str(v)
