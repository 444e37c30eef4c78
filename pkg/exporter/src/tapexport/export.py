"""Backbone export: torchvision model -> tap-output ONNX + manifest + refs.

The exported graph keeps the original classification output and adds one
named output per tapped stage. Reference dumps run the torch model on a
set of images (provided or synthesized) and write each tap activation as
NPY v1.0 float32 with a checksum line, for cross-runtime validation.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torchvision.models import get_model
from torchvision.models.feature_extraction import create_feature_extractor, get_graph_node_names
from torch.fx.passes.shape_prop import ShapeProp

from . import protowrite as pw
from .graph import ConversionError, convert_graph

TAPS_FORMAT = "fre-taps/1"
OPSET = 13

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# stage-boundary node names per supported architecture
STAGES = {
    "resnet18": ["layer1", "layer2", "layer3", "layer4"],
    "resnet50": ["layer1", "layer2", "layer3", "layer4"],
    "vgg16": ["features.4", "features.9", "features.16", "features.23", "features.30"],
    "efficientnet_b5": [f"features.{i}" for i in range(1, 9)],
}


class ExportError(ValueError):
    pass


@dataclass
class ExportSpec:
    backbone: str
    size: int = 256
    taps: list[str] = field(default_factory=list)   # empty: three middle stages
    weights: str | None = None                       # e.g. "DEFAULT"; None = random init
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in STAGES:
            raise ExportError(
                f"unknown backbone {self.backbone!r}; supported: {sorted(STAGES)}"
            )
        stages = STAGES[self.backbone]
        if not self.taps:
            mid = len(stages) // 2
            self.taps = stages[max(0, mid - 2) : mid + 1]
        bad = [t for t in self.taps if t not in stages]
        if bad:
            raise ExportError(f"unknown taps {bad}; valid stages: {stages}")


def _build_model(spec: ExportSpec):
    torch.manual_seed(spec.seed)
    model = get_model(spec.backbone, weights=spec.weights)
    return model.eval()


def _final_node(model) -> str:
    _, eval_nodes = get_graph_node_names(model)
    return eval_nodes[-1]


def _extractor(model, spec: ExportSpec):
    cls_node = _final_node(model)
    return create_feature_extractor(model, return_nodes=[*spec.taps, cls_node]), cls_node


def preprocess_reference(image: np.ndarray, size: int) -> torch.Tensor:
    """Decode-side preprocessing used for reference dumps: bilinear resize
    (half-pixel, no antialias), [0,1] scaling, ImageNet normalization."""
    t = torch.from_numpy(np.array(image, copy=True)).permute(2, 0, 1).float().unsqueeze(0)
    if t.shape[2] != size or t.shape[3] != size:
        t = F.interpolate(t, size=(size, size), mode="bilinear",
                          align_corners=False, antialias=False)
    t = t / 255.0
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (t - mean) / std


def export_onnx(spec: ExportSpec, out_dir) -> tuple[Path, Path]:
    """Write <backbone>.onnx + taps.json; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = _build_model(spec)
    gm, cls_node = _extractor(model, spec)

    example = torch.zeros(1, 3, spec.size, spec.size)
    ShapeProp(gm).propagate(example)
    try:
        builder, output_map = convert_graph(gm, input_name="input")
    except ConversionError as exc:
        raise ExportError(f"cannot convert {spec.backbone}: {exc}") from exc

    with torch.no_grad():
        outs = gm(example)
        reference_logits = model(example)
    # taps must not perturb the graph: extractor output == source model output
    if not torch.allclose(outs[cls_node], reference_logits, atol=1e-4):
        raise ExportError("extractor classification output deviates from source model")

    graph_outputs = [(output_map[cls_node], tuple(outs[cls_node].shape))]
    taps_meta = []
    for stage in spec.taps:
        shape = tuple(outs[stage].shape)
        graph_outputs.append((output_map[stage], shape))
        taps_meta.append(
            {
                "layer_id": f"{spec.backbone}/{stage}",
                "tensor": output_map[stage],
                "shape": list(shape[1:]),
            }
        )

    blob = pw.model_proto(
        builder.nodes,
        inputs=[("input", (1, 3, spec.size, spec.size))],
        outputs=graph_outputs,
        initializers=builder.initializers,
        opset=OPSET,
        graph_name=spec.backbone,
    )
    onnx_path = out_dir / f"{spec.backbone}.onnx"
    onnx_path.write_bytes(blob)

    manifest = {
        "format": TAPS_FORMAT,
        "backbone": spec.backbone,
        "onnx_file": onnx_path.name,
        "opset": OPSET,
        "input": {"name": "input", "shape": [1, 3, spec.size, spec.size]},
        "classification_output": output_map[cls_node],
        "taps": taps_meta,
        "export": {"weights": spec.weights, "seed": spec.seed},
    }
    manifest_path = out_dir / "taps.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return onnx_path, manifest_path


def _synthetic_images(count: int, size: int, seed: int):
    rng = np.random.default_rng(seed)
    for i in range(count):
        # mix of native-size and larger images so the resize path is covered
        s = size if i % 3 else size * 2
        yield f"im_{i:03d}", rng.integers(0, 256, size=(s, s, 3), dtype=np.uint8)


def dump_reference(spec: ExportSpec, out_dir, image_dir=None, count: int = 10,
                   seed: int = 7) -> Path:
    """Write ref/<image>__<tap>.npy (+ logits), images, and checksums.txt."""
    out_dir = Path(out_dir)
    ref_dir = out_dir / "ref"
    img_dir = ref_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    model = _build_model(spec)
    gm, cls_node = _extractor(model, spec)

    if image_dir is not None:
        paths = sorted(
            p for p in Path(image_dir).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
        )
        if not paths:
            raise ExportError(f"no images found in {image_dir}")
        images = [(p.stem, np.asarray(Image.open(p).convert("RGB"))) for p in paths]
    else:
        images = list(_synthetic_images(count, spec.size, seed))

    lines = []
    for name, pixels in images:
        Image.fromarray(pixels).save(img_dir / f"{name}.png")
        x = preprocess_reference(pixels, spec.size)
        with torch.no_grad():
            outs = gm(x)
        tensors = {"logits": outs[cls_node][0].numpy().astype(np.float32)}
        for stage in spec.taps:
            layer_id = f"{spec.backbone}/{stage}"
            tensors[layer_id] = outs[stage][0].numpy().astype(np.float32)
        for key, arr in tensors.items():
            fname = f"{name}__{key.replace('/', '__')}.npy"
            np.save(ref_dir / fname, arr)
            crc = zlib.crc32(np.ascontiguousarray(arr).tobytes())
            shape = "x".join(str(s) for s in arr.shape)
            lines.append(
                f"{fname} shape={shape} max_abs={np.abs(arr).max():.6g} crc32={crc:08x}"
            )
    (ref_dir / "checksums.txt").write_text("\n".join(lines) + "\n")
    return ref_dir
