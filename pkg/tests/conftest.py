import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from onnx_fixture import write_fixture


@pytest.fixture(scope="session")
def fixture_backbone(tmp_path_factory):
    """Two-conv ONNX graph + taps.json sized for the full CLI pipeline."""
    out = tmp_path_factory.mktemp("fixture_backbone")
    onnx_path, manifest_path = write_fixture(out, c1=8, c2=4, size=32)
    return {"onnx": onnx_path, "manifest": manifest_path, "c1": 8, "c2": 4, "size": 32}


def make_image(path, base=100, square=None, size=32, seed=0):
    """Write a small RGB PNG; optionally paint a bright square (defect)."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size, 3), base, dtype=np.uint8)
    img = np.clip(img + rng.integers(-5, 6, size=img.shape), 0, 255).astype(np.uint8)
    if square is not None:
        y, x, s = square
        img[y : y + s, x : x + s] = 255
    Image.fromarray(img).save(path)
    return img


def make_mask_png(path, square, size=32):
    mask = np.zeros((size, size), dtype=np.uint8)
    y, x, s = square
    mask[y : y + s, x : x + s] = 255
    Image.fromarray(mask, mode="L").save(path)
    return mask


@pytest.fixture()
def mvtec_tree(tmp_path):
    """Minimal MVTec-style category: train/good, test/good, test/crack + masks."""
    root = tmp_path / "widget"
    for sub in ("train/good", "test/good", "test/crack", "ground_truth/crack"):
        (root / sub).mkdir(parents=True)
    for i in range(6):
        make_image(root / "train" / "good" / f"{i:03d}.png", seed=i)
    for i in range(2):
        make_image(root / "test" / "good" / f"{i:03d}.png", seed=100 + i)
    for i in range(2):
        square = (8, 8 + 6 * i, 8)
        make_image(root / "test" / "crack" / f"{i:03d}.png", square=square, seed=200 + i)
        make_mask_png(root / "ground_truth" / "crack" / f"{i:03d}_mask.png", square)
    return root
