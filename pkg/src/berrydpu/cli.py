"""``berrydpu`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every failure prints one line ``berrydpu: error: <kind>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from . import bench, compiler, detector, evaluation, model_ir, quantizer

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    engine: str
    cfg: Path | None = None
    weights: Path | None = None
    model: Path | None = None
    threshold: float = detector.DEFAULT_CONF
    nms: float = detector.DEFAULT_NMS
    input: Path | None = None
    output: Path | None = None
    report_format: str = "json"

    def __post_init__(self):
        if self.engine not in ("float", "quant"):
            raise UsageError(f"unknown engine {self.engine!r}")
        if self.engine == "float" and (self.cfg is None or self.weights is None):
            raise UsageError("the float engine needs --cfg and --weights")
        if self.engine == "quant" and self.model is None:
            raise UsageError("the quant engine needs --model")
        if not 0 < self.threshold <= 1:
            raise UsageError("--thresh must lie in (0, 1]")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="berrydpu", description="Strawberry detection on an emulated int8 DPU.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def engine_flags(sp, thresh=detector.DEFAULT_CONF):
        sp.add_argument("--cfg", type=Path, help="Darknet cfg (float engine)")
        sp.add_argument("--weights", type=Path, help="Darknet weights (float engine)")
        sp.add_argument("--model", type=Path, help="quantized container (quant engine)")
        sp.add_argument("--engine", choices=("float", "quant"),
                        help="defaults to quant when --model is given, else float")
        sp.add_argument("--thresh", type=float, default=thresh)
        sp.add_argument("--nms", type=float, default=detector.DEFAULT_NMS)

    def report_flags(sp):
        sp.add_argument("--output", type=Path, help="report file (default stdout)")
        sp.add_argument("--format", choices=("json", "table"), default="json")
        sp.add_argument("--figure", type=Path, help="figure path (default: next to --output as .png)")
        sp.add_argument("--no-figure", action="store_true")

    sp = sub.add_parser("inspect", help="layer table with shapes and parameter counts")
    sp.add_argument("--cfg", type=Path, required=True)

    sp = sub.add_parser("detect", help="detect strawberries in one image or a directory")
    engine_flags(sp)
    sp.add_argument("--input", type=Path, required=True)
    sp.add_argument("--output", type=Path, help="JSON lines file (default stdout)")
    sp.add_argument("--annotate", type=Path, help="directory for annotated PNG copies")

    sp = sub.add_parser("quantize", help="calibrate and quantize to a BQNT1 container")
    sp.add_argument("--cfg", type=Path, required=True)
    sp.add_argument("--weights", type=Path, required=True)
    sp.add_argument("--calib", type=Path, required=True, help="directory of calibration images")
    sp.add_argument("--output", type=Path, required=True)

    sp = sub.add_parser("compile", help="instruction listing")
    sp.add_argument("--cfg", type=Path)
    sp.add_argument("--model", type=Path)
    sp.add_argument("--mode", choices=("float32", "int8"))
    sp.add_argument("--output", type=Path)

    sp = sub.add_parser("eval", help="detection rate over a labeled image set")
    engine_flags(sp)
    sp.add_argument("--input", type=Path, required=True, help="image directory")
    sp.add_argument("--labels", type=Path, help="label directory (default: next to the images)")
    sp.add_argument("--iou", type=float, default=0.5)
    sp.add_argument("--missing-labels", choices=("fail", "skip"), default="fail")
    report_flags(sp)

    sp = sub.add_parser("video", help="per-frame confidence bands over a frame directory")
    engine_flags(sp, thresh=0.30)
    sp.add_argument("--input", type=Path, required=True, help="directory of numbered frames")
    sp.add_argument("--bands", default="0.30-0.60,0.60-1.0")
    report_flags(sp)

    sp = sub.add_parser("bench", help="frame rate of the float and quantized pipelines")
    sp.add_argument("--cfg", type=Path)
    sp.add_argument("--weights", type=Path)
    sp.add_argument("--model", type=Path)
    sp.add_argument("--input", type=Path, required=True, help="image directory")
    sp.add_argument("--thresh", type=float, default=detector.DEFAULT_CONF)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--iterations", type=int, default=10)
    sp.add_argument("--limit", type=int, help="use only the first N images")
    sp.add_argument("--pipelined", action="store_true")
    report_flags(sp)
    return p


def _run_config(args) -> RunConfig:
    engine = args.engine or ("quant" if args.model else "float")
    return RunConfig(args.command, engine, args.cfg, args.weights, args.model, args.thresh, args.nms,
                     args.input, args.output, getattr(args, "format", "json"))


def make_engine(cfg: RunConfig):
    if cfg.engine == "quant":
        return detector.QuantEngine(quantizer.read_quantized(cfg.model))
    graph = model_ir.load_config(cfg.cfg)
    return detector.FloatEngine(graph, model_ir.read_weights(graph, cfg.weights))


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return evaluation.list_images(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return [path]


def _emit(text: str, output: Path | None) -> None:
    if output is None:
        sys.stdout.write(text)
    else:
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(text)


def _emit_report(args, obj: dict, table: str, plot) -> None:
    text = table if args.format == "table" else json.dumps(obj, indent=2, sort_keys=True) + "\n"
    _emit(text, args.output)
    if args.no_figure:
        return
    figure = args.figure or (args.output.with_suffix(".png") if args.output else None)
    if figure is not None:
        plot(figure)


# ---------------------------------------------------------------------------
# subcommands


def cmd_inspect(args) -> int:
    graph = model_ir.load_config(args.cfg)
    rows = [("idx", "kind", "detail", "output", "params")]
    total = 0
    for idx, kind, detail, shape, params in model_ir.describe(graph):
        rows.append((str(idx), kind, detail, "x".join(map(str, shape)), str(params)))
        total += params
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.append(f"input {graph.input_channels}x{graph.input_height}x{graph.input_width}, "
                 f"{len(graph.layers)} layers, {len(graph.yolo_layers)} yolo heads, {total} parameters")
    _emit("\n".join(lines) + "\n", None)
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _run_config(args)
    engine = make_engine(cfg)
    records = []
    for path in _inputs(cfg.input):
        image = detector.load_image(path)
        dets = detector.detect(image, engine, cfg.threshold, cfg.nms)
        records.append(json.dumps(detector.detections_record(path.name, dets), sort_keys=True))
        if args.annotate:
            args.annotate.mkdir(parents=True, exist_ok=True)
            detector.save_image(args.annotate / f"{path.stem}.png", detector.annotate(image, dets))
    _emit("".join(r + "\n" for r in records), cfg.output)
    return EXIT_OK


def calibration_tensors(graph: model_ir.NetworkGraph, directory: Path):
    paths = evaluation.list_images(directory)
    if not paths:
        raise quantizer.CalibrationError(f"no calibration images in {directory}")
    for path in paths:
        yield detector.letterbox(detector.load_image(path), (graph.input_width, graph.input_height))[0]


def cmd_quantize(args) -> int:
    graph = model_ir.load_config(args.cfg)
    store = model_ir.read_weights(graph, args.weights)
    table = quantizer.calibrate(graph, store, calibration_tensors(graph, args.calib))
    model = quantizer.quantize_network(graph, store, table)
    quantizer.write_quantized(model, args.output)
    summary = {"output": str(args.output), "input_f": table.input_f,
               "saturated_weights": sum(model.saturation.values()),
               "layers": len(model.kernels)}
    _emit(json.dumps(summary, sort_keys=True) + "\n", None)
    return EXIT_OK


def cmd_compile(args) -> int:
    mode = args.mode or ("int8" if args.model else "float32")
    if args.model:
        model = quantizer.read_quantized(args.model)
        graph, weights = model.graph, model
    elif args.cfg:
        graph, weights = model_ir.load_config(args.cfg), None
    else:
        raise UsageError("compile needs --cfg or --model")
    if mode == "int8" and not args.model:
        raise UsageError("int8 mode needs a quantization table (pass --model)")
    if mode == "float32":
        weights = None
    program = compiler.compile_graph(graph, mode, weights=weights)
    _emit(compiler.dump_program(program), args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    engine = make_engine(cfg)
    dataset = evaluation.load_dataset(cfg.input, args.labels)
    report = evaluation.evaluate(dataset, engine, cfg.threshold, args.iou, args.missing_labels)
    from .plotting import plot_eval

    obj = {**report.to_json(), "engine": cfg.engine}
    _emit_report(args, obj, evaluation.format_eval_table(report), lambda p: plot_eval(report, p))
    return EXIT_OK


def cmd_video(args) -> int:
    cfg = _run_config(args)
    engine = make_engine(cfg)
    try:
        bands = evaluation.parse_bands(args.bands)
    except ValueError as err:
        raise UsageError(f"--bands: {err}") from None
    report = evaluation.analyze_video(evaluation.list_images(cfg.input), engine, cfg.threshold, bands)
    from .plotting import plot_video

    obj = {**report.to_json(), "engine": cfg.engine}
    _emit_report(args, obj, evaluation.format_video_table(report), lambda p: plot_video(report, p))
    return EXIT_OK


def cmd_bench(args) -> int:
    engines = {}
    if args.cfg and args.weights:
        graph = model_ir.load_config(args.cfg)
        engines["float"] = detector.FloatEngine(graph, model_ir.read_weights(graph, args.weights))
    elif args.cfg or args.weights:
        raise UsageError("the float pipeline needs both --cfg and --weights")
    if args.model:
        engines["quant"] = detector.QuantEngine(quantizer.read_quantized(args.model))
    if not engines:
        raise UsageError("bench needs --cfg/--weights, --model, or both")
    paths = _inputs(args.input)[: args.limit]
    images = [detector.load_image(p) for p in paths]
    pipelines = {name: (lambda image, e=e: detector.detect(image, e, args.thresh)) for name, e in engines.items()}
    report = bench.measure(pipelines, images, args.warmup, args.iterations,
                           "pipelined" if args.pipelined else "sequential")
    from .plotting import plot_bench

    _emit_report(args, report.to_json(), bench.format_table(report), lambda p: plot_bench(report, p))
    return EXIT_OK


COMMANDS = {
    "inspect": cmd_inspect,
    "detect": cmd_detect,
    "quantize": cmd_quantize,
    "compile": cmd_compile,
    "eval": cmd_eval,
    "video": cmd_video,
    "bench": cmd_bench,
}


def _fail(kind: str, err, code: int) -> int:
    message = " ".join(str(err).split())
    print(f"berrydpu: error: {kind}: {message}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as err:
        return _fail("usage", err, EXIT_USAGE)
    except model_ir.ConfigError as err:
        return _fail("config", err, EXIT_USAGE)
    except (compiler.CompileError, quantizer.QuantConfigError) as err:
        return _fail("config", err, EXIT_USAGE)
    except FileNotFoundError as err:
        return _fail("io", err, EXIT_RUNTIME)
    except Exception as err:  # noqa: BLE001 - every failure becomes one stderr line
        return _fail(type(err).__name__, err, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
