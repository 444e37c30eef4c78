"""CI fixture: a two-conv graph with deterministic weights, no downloads.

Lets consumers exercise ONNX loading, tap execution, and the manifest
contract without torchvision weights or any network access.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import protowrite as pw

FIXTURE_SEED = 20240601


def fixture_weights(c1: int = 8, c2: int = 4):
    rng = np.random.default_rng(FIXTURE_SEED)
    w1 = (rng.standard_normal((c1, 3, 3, 3)) / np.sqrt(27.0)).astype(np.float32)
    b1 = rng.uniform(-0.5, 0.5, size=c1).astype(np.float32)
    w2 = (rng.standard_normal((c2, c1, 3, 3)) / np.sqrt(9.0 * c1)).astype(np.float32)
    b2 = rng.uniform(-0.5, 0.5, size=c2).astype(np.float32)
    return w1, b1, w2, b2


def write_fixture(out_dir, c1: int = 8, c2: int = 4, size: int = 32) -> tuple[Path, Path]:
    """Write fixture.onnx + taps.json; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    w1, b1, w2, b2 = fixture_weights(c1, c2)

    nodes = [
        pw.node_proto("Conv", ["input", "w1", "b1"], ["conv1_raw"], name="conv1",
                      attrs={"kernel_shape": [3, 3], "pads": [1, 1, 1, 1], "strides": [1, 1]}),
        pw.node_proto("Relu", ["conv1_raw"], ["conv1"], name="relu1"),
        pw.node_proto("Conv", ["conv1", "w2", "b2"], ["conv2"], name="conv2",
                      attrs={"kernel_shape": [3, 3], "pads": [1, 1, 1, 1], "strides": [1, 1]}),
    ]
    blob = pw.model_proto(
        nodes,
        inputs=[("input", (1, 3, size, size))],
        outputs=[("conv1", (1, c1, size, size)), ("conv2", (1, c2, size, size))],
        initializers=[("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)],
        opset=13,
        graph_name="fixture",
    )
    onnx_path = out_dir / "fixture.onnx"
    onnx_path.write_bytes(blob)
    manifest = {
        "format": "fre-taps/1",
        "backbone": "fixture",
        "onnx_file": onnx_path.name,
        "opset": 13,
        "input": {"name": "input", "shape": [1, 3, size, size]},
        "classification_output": None,
        "taps": [
            {"layer_id": "fixture/conv1", "tensor": "conv1", "shape": [c1, size, size]},
            {"layer_id": "fixture/conv2", "tensor": "conv2", "shape": [c2, size, size]},
        ],
    }
    manifest_path = out_dir / "taps.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return onnx_path, manifest_path
