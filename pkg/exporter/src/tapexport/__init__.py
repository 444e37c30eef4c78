"""Offline exporter: torchvision backbones to tap-output ONNX graphs."""

from .export import ExportSpec, STAGES, dump_reference, export_onnx, preprocess_reference
from .fixture import write_fixture

__version__ = "0.1.0"
