"""Backbone feature acquisition: live ONNX execution or pre-extracted NPY.

A backbone ships as an .onnx graph plus a taps.json sidecar naming the
intermediate tensors to expose. Loading parses the graph, checks every tap
tensor exists, and dry-runs a zero input so shape conflicts and
unsupported operators surface immediately rather than mid-evaluation.

The feature-directory path serves the same role with no inference runtime:
a manifest.json plus one NPY file per (image, layer), as produced by the
`extract` command or by the offline exporter's reference dumps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _onnx
from .dataset import PreprocessConfig
from .tensor import FeatureTensor, load_npy_array, save_npy

TAPS_FORMAT = "fre-taps/1"
FEATURES_FORMAT = "fre-features/1"


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    """Parsed taps.json: where the graph lives and which tensors to expose."""

    backbone: str
    onnx_path: Path
    input_name: str
    input_shape: tuple  # (1, 3, H, W)
    taps: tuple         # ((layer_id, tensor_name), ...) in declared order
    tap_shapes: dict    # layer_id -> (C, H, W)
    classification_output: str | None = None

    @classmethod
    def from_manifest(cls, manifest_path) -> "BackboneSpec":
        manifest_path = Path(manifest_path)
        with open(manifest_path) as f:
            m = json.load(f)
        if m.get("format") != TAPS_FORMAT:
            raise BackboneError(f"{manifest_path}: not a {TAPS_FORMAT} manifest")
        taps = tuple((t["layer_id"], t["tensor"]) for t in m["taps"])
        if not taps:
            raise BackboneError(f"{manifest_path}: no taps declared")
        return cls(
            backbone=m["backbone"],
            onnx_path=manifest_path.parent / m["onnx_file"],
            input_name=m["input"]["name"],
            input_shape=tuple(m["input"]["shape"]),
            taps=taps,
            tap_shapes={t["layer_id"]: tuple(t["shape"]) for t in m["taps"]},
            classification_output=m.get("classification_output"),
        )


class Backbone:
    """Immutable handle over a validated, executable tap graph."""

    def __init__(self, spec: BackboneSpec):
        self.spec = spec
        self.model = _onnx.load_model(spec.onnx_path)
        self._executor = _onnx.Executor(self.model)
        self._tap_tensors = [tensor for _, tensor in spec.taps]

        producible = self.model.producible()
        missing = [t for t in self._tap_tensors if t not in producible]
        if missing:
            raise BackboneError(f"{spec.onnx_path}: tap tensors not in graph: {missing}")
        if spec.classification_output and spec.classification_output not in producible:
            raise BackboneError(
                f"{spec.onnx_path}: classification output "
                f"{spec.classification_output!r} not in graph"
            )

        # dry run: surfaces unsupported operators and shape conflicts at load
        zero = np.zeros(spec.input_shape, dtype=np.float32)
        outputs = self._executor.run({spec.input_name: zero}, self._tap_tensors)
        for layer_id, tensor in spec.taps:
            got = outputs[tensor].shape[1:]
            declared = spec.tap_shapes[layer_id]
            if tuple(got) != tuple(declared):
                raise BackboneError(
                    f"{spec.onnx_path}: tap {layer_id!r} produces shape {tuple(got)}, "
                    f"manifest declares {declared}"
                )

    @property
    def layer_ids(self) -> list[str]:
        return [layer_id for layer_id, _ in self.spec.taps]

    def forward(self, x: np.ndarray, extra_outputs: list[str] | None = None):
        """Run one (3, H, W) input; returns {layer_id: FeatureTensor}.

        extra_outputs adds raw graph tensors (e.g. the classification
        output) to the result under their tensor names.
        """
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        if tuple(x.shape) != tuple(self.spec.input_shape):
            raise BackboneError(
                f"input shape {tuple(x.shape)} does not match declared "
                f"{tuple(self.spec.input_shape)}"
            )
        names = list(self._tap_tensors) + list(extra_outputs or [])
        outs = self._executor.run({self.spec.input_name: x}, names)
        result = {
            layer_id: FeatureTensor(layer_id=layer_id, data=outs[tensor][0])
            for layer_id, tensor in self.spec.taps
        }
        for name in extra_outputs or []:
            result[name] = outs[name]
        return result


def load_backbone(manifest_path) -> Backbone:
    """Load and validate a tap graph from its taps.json manifest."""
    return Backbone(BackboneSpec.from_manifest(manifest_path))


# ---------------------------------------------------------------------------
# pre-extracted feature directories


def sanitize_id(identifier: str) -> str:
    return identifier.replace("/", "__")


class FeatureDirectory:
    """Feature store written by `extract`: manifest.json + NPY per (image, layer)."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.is_file():
            raise BackboneError(f"{self.root}: no manifest.json")
        with open(manifest_path) as f:
            self.manifest = json.load(f)
        if self.manifest.get("format") != FEATURES_FORMAT:
            raise BackboneError(f"{manifest_path}: not a {FEATURES_FORMAT} manifest")

    @property
    def backbone_name(self) -> str:
        return self.manifest["backbone"]

    @property
    def layers(self) -> list[str]:
        return list(self.manifest["layers"])

    @property
    def input_resolution(self) -> tuple[int, int]:
        return tuple(self.manifest["input_resolution"])

    @property
    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig.from_dict(self.manifest["preprocess"])

    def entries(self, split: str | None = None) -> list[dict]:
        entries = self.manifest["images"]
        if split is not None:
            entries = [e for e in entries if e["split"] == split]
        return entries

    def features_for(self, entry: dict, layers: list[str] | None = None) -> dict:
        out = {}
        for layer_id in layers or self.layers:
            try:
                rel = entry["files"][layer_id]
            except KeyError:
                raise BackboneError(
                    f"image {entry['id']!r} has no features for layer {layer_id!r}"
                ) from None
            arr = load_npy_array(self.root / rel)
            out[layer_id] = FeatureTensor(layer_id=layer_id, data=arr)
        return out

    def mask_for(self, entry: dict) -> np.ndarray | None:
        rel = entry.get("mask")
        if not rel:
            return None
        return (load_npy_array(self.root / rel) != 0).astype(np.uint8)


class FeatureDirectoryWriter:
    """Builds a feature directory incrementally; call finish() to seal it."""

    def __init__(self, root, backbone: str, layers: list[str], preprocess: PreprocessConfig,
                 input_resolution: tuple[int, int]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.backbone = backbone
        self.layers = list(layers)
        self.preprocess = preprocess
        self.input_resolution = tuple(input_resolution)
        self.entries: list[dict] = []

    def add_image(self, image_id: str, split: str, defect_type: str,
                  features: dict, mask: np.ndarray | None = None, source: str = "") -> None:
        files = {}
        for layer_id in self.layers:
            tensor = features[layer_id]
            rel = f"{sanitize_id(image_id)}__{sanitize_id(layer_id)}.npy"
            save_npy(self.root / rel, tensor.data)
            files[layer_id] = rel
        mask_rel = None
        if mask is not None:
            mask_rel = f"{sanitize_id(image_id)}__mask.npy"
            save_npy(self.root / mask_rel, mask.astype(np.float32))
        self.entries.append(
            {
                "id": image_id,
                "split": split,
                "defect_type": defect_type,
                "label": 0 if defect_type == "good" else 1,
                "files": files,
                "mask": mask_rel,
                "source": source,
            }
        )

    def finish(self) -> Path:
        manifest = {
            "format": FEATURES_FORMAT,
            "backbone": self.backbone,
            "layers": self.layers,
            "preprocess": self.preprocess.to_dict(),
            "input_resolution": list(self.input_resolution),
            "images": self.entries,
        }
        path = self.root / "manifest.json"
        with open(path, "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        return path
