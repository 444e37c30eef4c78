"""2-D resampling primitives used for anomaly maps, images and masks.

Bilinear follows the half-pixel-center convention (align_corners=False):
source coordinate = (dst + 0.5) * scale - 0.5, clamped to the grid. The
interpolation is written in lerp form a + t*(b - a) so constant inputs are
reproduced exactly, not just to rounding.
"""

from __future__ import annotations

import numpy as np


def _source_coords(n_dst: int, n_src: int):
    coords = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    coords = np.clip(coords, 0.0, n_src - 1.0)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = coords - lo
    return lo, hi, frac


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D array (or stack of 2-D planes, leading axes kept)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1x1, got ({out_h}, {out_w})")
    arr = np.asarray(arr, dtype=np.float64)
    src_h, src_w = arr.shape[-2], arr.shape[-1]
    if (src_h, src_w) == (out_h, out_w):
        return arr.copy()
    y0, y1, fy = _source_coords(out_h, src_h)
    x0, x1, fx = _source_coords(out_w, src_w)
    top = arr[..., y0, :]
    bot = arr[..., y1, :]
    rows = top + fy[:, None] * (bot - top)
    left = rows[..., :, x0]
    right = rows[..., :, x1]
    return left + fx * (right - left)


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize; preserves the value set (e.g. binary masks)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1x1, got ({out_h}, {out_w})")
    arr = np.asarray(arr)
    src_h, src_w = arr.shape[-2], arr.shape[-1]
    if (src_h, src_w) == (out_h, out_w):
        return arr.copy()
    ys = np.minimum(
        np.floor((np.arange(out_h) + 0.5) * (src_h / out_h)).astype(np.int64), src_h - 1
    )
    xs = np.minimum(
        np.floor((np.arange(out_w) + 0.5) * (src_w / out_w)).astype(np.int64), src_w - 1
    )
    return arr[..., ys, :][..., :, xs]
