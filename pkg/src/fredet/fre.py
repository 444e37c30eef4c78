"""Feature reconstruction error: vectors, scores, heatmaps, fusion.

The residual between a feature vector and its reconstruction from the
fitted subspace drives everything: its l2 norm is the image-level
detection score, and channel-averaging its absolute values on the layer
grid gives the per-layer anomaly map. Maps from several layers, resized
to input resolution, combine by per-pixel geometric mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import resample
from .subspace import ModelBundle, SubspaceModel, residual
from .tensor import INPUT_RES, NATIVE, AnomalyMap, FeatureTensor, vectorize

# Guards exact-zero pixels in the geometric mean; a single zero would
# otherwise annihilate the fused value regardless of the other layers.
FUSE_EPS = 1e-12


@dataclass(frozen=True)
class FreResult:
    """Per-layer outcome: residual vector, its norm, and the native-grid map."""

    layer_id: str
    fre_vector: np.ndarray
    score: float
    map: AnomalyMap


@dataclass(frozen=True)
class FusedMap:
    """Geometric-mean combination of per-layer maps at input resolution."""

    layer_ids: tuple
    map: AnomalyMap


def fre_vector(model: SubspaceModel, u: FeatureTensor) -> np.ndarray:
    """Residual e = vec(u) - reconstruct(transform(vec(u)))."""
    if u.shape != model.feature_shape:
        raise ValueError(f"feature shape {u.shape} does not match model {model.feature_shape}")
    return residual(model, vectorize(u))


def fre_score(e: np.ndarray) -> float:
    """l2 norm of the residual; the image-level detection score."""
    return float(np.linalg.norm(np.asarray(e, dtype=np.float64)))


def fre_map(e: np.ndarray, shape: tuple[int, int, int], signed: bool = False) -> AnomalyMap:
    """Channel-average the residual on the layer grid.

    Default averages |e| per channel so the map is non-negative; signed=True
    averages raw residuals instead (cancellation possible).
    """
    c, h, w = shape
    e = np.asarray(e)
    if e.size != c * h * w:
        raise ValueError(f"residual length {e.size} does not match shape {shape}")
    grid = e.reshape(c, h, w)
    if not signed:
        grid = np.abs(grid)
    return AnomalyMap(data=grid.mean(axis=0, dtype=np.float64), resolution=NATIVE)


def compute_fre(model: SubspaceModel, u: FeatureTensor, signed_map: bool = False) -> FreResult:
    """Run the full per-layer chain on one feature tensor."""
    e = fre_vector(model, u)
    return FreResult(
        layer_id=model.layer_id,
        fre_vector=e,
        score=fre_score(e),
        map=fre_map(e, model.feature_shape, signed=signed_map),
    )


def resize_map(m: AnomalyMap, target: tuple[int, int], mode: str = "bilinear") -> AnomalyMap:
    """Resize a map to the input resolution (bilinear default, nearest option)."""
    h, w = target
    if mode == "bilinear":
        data = resample.bilinear_resize(m.data, h, w)
    elif mode == "nearest":
        data = resample.nearest_resize(m.data, h, w)
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return AnomalyMap(data=data, resolution=INPUT_RES)


def fuse_maps(maps: list[AnomalyMap], layer_ids=None, normalize: bool = False) -> FusedMap:
    """Per-pixel geometric mean of same-resolution maps.

    normalize=True min-max scales each map first (layers can sit on very
    different error scales); default fuses raw maps.
    """
    if not maps:
        raise ValueError("need at least one map to fuse")
    if layer_ids is not None and len(layer_ids) != len(maps):
        raise ValueError("one layer id per map required")
    shape = maps[0].shape
    resolution = maps[0].resolution
    for m in maps[1:]:
        if m.shape != shape:
            raise ValueError(f"resolution mismatch: {m.shape} vs {shape}")
    stack = np.stack([m.data.astype(np.float64) for m in maps])
    if np.any(stack < 0):
        raise ValueError("maps must be non-negative for geometric fusion")
    if normalize:
        lo = stack.min(axis=(1, 2), keepdims=True)
        hi = stack.max(axis=(1, 2), keepdims=True)
        stack = (stack - lo) / np.where(hi - lo > 0, hi - lo, 1.0)
    fused = np.prod(stack + FUSE_EPS, axis=0) ** (1.0 / len(maps)) - FUSE_EPS
    return FusedMap(
        layer_ids=tuple(layer_ids) if layer_ids is not None else tuple(range(len(maps))),
        map=AnomalyMap(data=np.clip(fused, 0.0, None), resolution=resolution),
    )


def smooth_map(m: AnomalyMap, sigma: float) -> AnomalyMap:
    """Optional Gaussian post-smoothing (off by default in the pipeline)."""
    if sigma <= 0:
        return m
    from scipy.ndimage import gaussian_filter

    return AnomalyMap(data=gaussian_filter(m.data, sigma=sigma), resolution=m.resolution)


def score_image(
    bundle: ModelBundle,
    features: dict,
    input_res: tuple[int, int],
    signed_map: bool = False,
    normalize_maps: bool = False,
    smooth_sigma: float = 0.0,
) -> tuple[float, FusedMap]:
    """Score one image: detection score from the bundle's scoring layer,
    fused map from its fusion layers resized to input resolution."""
    missing = [l for l in bundle.fusion_layers if l not in features]
    if bundle.score_layer not in features:
        missing.append(bundle.score_layer)
    if missing:
        raise KeyError(f"missing features for layers: {sorted(set(missing))}")

    per_layer = {}
    for layer_id in dict.fromkeys((*bundle.fusion_layers, bundle.score_layer)):
        per_layer[layer_id] = compute_fre(
            bundle.models[layer_id], features[layer_id], signed_map=signed_map
        )
    score = per_layer[bundle.score_layer].score
    resized = [resize_map(per_layer[l].map, input_res) for l in bundle.fusion_layers]
    fused = fuse_maps(resized, layer_ids=bundle.fusion_layers, normalize=normalize_maps)
    if smooth_sigma > 0:
        fused = FusedMap(layer_ids=fused.layer_ids, map=smooth_map(fused.map, smooth_sigma))
    return score, fused
