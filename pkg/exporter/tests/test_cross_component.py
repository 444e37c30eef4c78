"""Cross-component acceptance: exported artifacts consumed by the detector.

Drives the detector package through its external interfaces (the `fredet`
CLI plus the NPY/ONNX/taps.json files) and checks graph-output parity,
tap-activation parity, and bit-exact NPY interchange. Skips when the
detector package is not installed alongside.
"""

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
import torch

fredet = pytest.importorskip("fredet")

from tapexport import ExportSpec, dump_reference, export_onnx
from tapexport.export import _build_model, _extractor, preprocess_reference


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    out = tmp_path_factory.mktemp("export")
    spec = ExportSpec("resnet18", size=96, taps=["layer1", "layer2", "layer3"], seed=0)
    onnx_path, manifest_path = export_onnx(spec, out)
    ref_dir = dump_reference(spec, out, count=10, seed=21)
    return {"spec": spec, "onnx": onnx_path, "manifest": manifest_path, "ref": ref_dir}


def test_npy_dumps_load_bit_exactly(exported):
    for npy in sorted(exported["ref"].glob("*.npy")):
        ours = np.load(npy)
        theirs = fredet.load_npy_array(npy)
        assert theirs.dtype == np.float32
        assert ours.tobytes() == theirs.tobytes(), npy.name


def test_classification_parity_and_tap_activations(exported):
    """Exported graph on the detector runtime vs the torch source model:
    logits within 1e-4, tap activations within 1e-3 max-abs."""
    spec = exported["spec"]
    backbone = fredet.load_backbone(exported["manifest"])
    model = _build_model(spec)
    gm, cls_node = _extractor(model, spec)

    from PIL import Image

    worst_tap = 0.0
    worst_logits = 0.0
    images = sorted((exported["ref"] / "images").glob("*.png"))
    assert len(images) == 10
    for img_path in images:
        pixels = np.asarray(Image.open(img_path).convert("RGB"))
        x = preprocess_reference(pixels, spec.size)
        with torch.no_grad():
            torch_outs = gm(x)
        feats = backbone.forward(
            x[0].numpy(), extra_outputs=[backbone.spec.classification_output]
        )
        for stage in spec.taps:
            layer_id = f"resnet18/{stage}"
            diff = float(np.max(np.abs(feats[layer_id].data - torch_outs[stage][0].numpy())))
            worst_tap = max(worst_tap, diff)
        logits_diff = float(
            np.max(
                np.abs(
                    feats[backbone.spec.classification_output][0]
                    - torch_outs[cls_node][0].numpy()
                )
            )
        )
        worst_logits = max(worst_logits, logits_diff)
    assert worst_tap <= 1e-3, worst_tap
    assert worst_logits <= 1e-4, worst_logits
    print(
        f"\nACCEPTANCE PASS criterion 9 (parity): logits {worst_logits:.2e} <= 1e-4, "
        f"taps {worst_tap:.2e} <= 1e-3 on 10 reference images"
    )


def test_detector_cli_extracts_matching_features(exported, tmp_path):
    """`fredet extract` over the reference images reproduces the exporter's
    reference activations within 1e-3 max-abs."""
    images = sorted((exported["ref"] / "images").glob("*.png"))
    root = tmp_path / "dataset"
    (root / "train" / "good").mkdir(parents=True)
    (root / "test" / "good").mkdir(parents=True)
    for img in images[:2]:
        shutil.copy(img, root / "train" / "good" / img.name)
    for img in images[2:]:
        shutil.copy(img, root / "test" / "good" / img.name)

    feat_dir = tmp_path / "features"
    proc = subprocess.run(
        [
            sys.executable, "-m", "fredet.cli", "extract",
            "--dataset", str(root), "--backbone", str(exported["manifest"]),
            "--out", str(feat_dir), "--workers", "1",
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr

    manifest = json.loads((feat_dir / "manifest.json").read_text())
    worst = 0.0
    compared = 0
    for entry in manifest["images"]:
        stem = entry["id"].rsplit("/", 1)[-1]
        for layer_id, rel in entry["files"].items():
            got = np.load(feat_dir / rel)
            ref = np.load(exported["ref"] / f"{stem}__{layer_id.replace('/', '__')}.npy")
            worst = max(worst, float(np.max(np.abs(got - ref))))
            compared += 1
    assert compared == len(images) * 3
    assert worst <= 1e-3, worst
    print(
        f"\nACCEPTANCE PASS criterion 9 (pipeline): extract vs reference dumps "
        f"max-abs {worst:.2e} <= 1e-3 over {compared} tensors"
    )
