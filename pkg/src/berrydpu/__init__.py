"""YOLOv3 strawberry detection with a float reference path and an emulated int8 DPU."""

from .compiler import Program, compile_graph, execute, interpret
from .detector import Detection, FloatEngine, QuantEngine, detect, letterbox
from .model_ir import NetworkGraph, WeightStore, fold_batchnorm, load_config, parse_config, read_weights
from .quantizer import QuantizedModel, QuantTable, calibrate, quantize_network, read_quantized

__version__ = "0.1.0"

__all__ = [
    "Detection", "FloatEngine", "NetworkGraph", "Program", "QuantEngine", "QuantTable", "QuantizedModel",
    "WeightStore", "calibrate", "compile_graph", "detect", "execute", "fold_batchnorm", "interpret",
    "letterbox", "load_config", "parse_config", "quantize_network", "read_quantized", "read_weights",
]
