"""Dataset ingestion and preprocessing for MVTec-AD / MTD style trees.

Expected layout under the category root:

    train/good/NNN.png
    test/good/NNN.png
    test/<defect>/NNN.png
    ground_truth/<defect>/NNN_mask.png     (mvtec: required per defect image)

The mtd layout walks the same tree but masks are optional (detection-only
datasets ship without them). Scanning is lexicographic and total: every
file under the split directories is either ingested or raises an error
naming it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import resample

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DatasetError(ValueError):
    pass


class EmptySplitError(DatasetError):
    pass


class MissingMaskError(DatasetError):
    pass


class UnreadableFileError(DatasetError):
    pass


@dataclass(frozen=True)
class Sample:
    """Descriptor for one dataset image; pixels are decoded on demand."""

    image_id: str
    split: str                 # train | test
    defect_type: str           # "good" or defect name
    image_path: Path
    mask_path: Path | None = None

    @property
    def label(self) -> int:
        return 0 if self.defect_type == "good" else 1

    @property
    def original_size(self) -> tuple[int, int]:
        """(H, W) of the stored image, read from the file header."""
        with Image.open(self.image_path) as im:
            return im.height, im.width


@dataclass(frozen=True)
class PreprocessConfig:
    """Resize + normalization applied before the backbone."""

    target: tuple[int, int] = (256, 256)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    interpolation: str = "bilinear"

    def __post_init__(self):
        if min(self.target) < 32:
            raise ValueError(f"target size must be >= 32, got {self.target}")
        if any(s <= 0 for s in self.std):
            raise ValueError("std must be positive per channel")

    def to_dict(self) -> dict:
        return {
            "target": list(self.target),
            "mean": list(self.mean),
            "std": list(self.std),
            "interpolation": self.interpolation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        return cls(
            target=tuple(d["target"]),
            mean=tuple(d["mean"]),
            std=tuple(d["std"]),
            interpolation=d.get("interpolation", "bilinear"),
        )


def _image_files(directory: Path):
    for path in sorted(directory.iterdir()):
        if path.is_dir():
            raise UnreadableFileError(f"unexpected directory inside class folder: {path}")
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            raise UnreadableFileError(f"not a supported image file: {path}")
        yield path


def scan_dataset(root, layout: str = "mvtec") -> list[Sample]:
    """Enumerate samples deterministically; pair defect images with masks.

    mvtec requires a mask per test defect image; mtd treats masks as
    optional. Raises EmptySplitError when train or test holds no images.
    """
    if layout not in ("mvtec", "mtd"):
        raise DatasetError(f"unknown layout {layout!r}")
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")

    samples: list[Sample] = []
    for split in ("train", "test"):
        split_dir = root / split
        if not split_dir.is_dir():
            raise EmptySplitError(f"missing split directory: {split_dir}")
        class_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
        count_before = len(samples)
        for class_dir in class_dirs:
            defect = class_dir.name
            if split == "train" and defect != "good":
                raise DatasetError(f"train split may only contain 'good', found: {class_dir}")
            for img in _image_files(class_dir):
                mask_path = None
                if split == "test" and defect != "good":
                    candidate = root / "ground_truth" / defect / f"{img.stem}_mask.png"
                    if candidate.is_file():
                        mask_path = candidate
                    elif layout == "mvtec":
                        raise MissingMaskError(f"no ground-truth mask for {img}: expected {candidate}")
                samples.append(
                    Sample(
                        image_id=f"{split}/{defect}/{img.stem}",
                        split=split,
                        defect_type=defect,
                        image_path=img,
                        mask_path=mask_path,
                    )
                )
        if len(samples) == count_before:
            raise EmptySplitError(f"split contains no images: {split_dir}")
    return sorted(samples, key=lambda s: s.image_id)


def load_rgb(path) -> np.ndarray:
    """Decode an image file to H x W x 3 uint8 RGB."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise UnreadableFileError(f"cannot decode image {path}: {exc}") from exc


def load_mask(path) -> np.ndarray:
    """Decode a ground-truth mask to a strictly binary H x W uint8 array."""
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise UnreadableFileError(f"cannot decode mask {path}: {exc}") from exc
    return (gray > 127).astype(np.uint8)


def preprocess(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Resize, scale to [0, 1], normalize per channel; returns (3, H, W) float32."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    h, w = config.target
    chw = image.astype(np.float64).transpose(2, 0, 1)
    if config.interpolation == "bilinear":
        chw = resample.bilinear_resize(chw, h, w)
    elif config.interpolation == "nearest":
        chw = resample.nearest_resize(chw, h, w).astype(np.float64)
    else:
        raise ValueError(f"unknown interpolation {config.interpolation!r}")
    chw /= 255.0
    mean = np.asarray(config.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(config.std, dtype=np.float64)[:, None, None]
    return ((chw - mean) / std).astype(np.float32)


def preprocess_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize keeping the mask strictly binary."""
    mask = np.asarray(mask)
    out = resample.nearest_resize(mask, target[0], target[1])
    return (out != 0).astype(np.uint8)
