"""Truncated-PCA subspace models over vectorized deep features.

Fitting centers the rows, decomposes the centered matrix, and keeps the
smallest number of principal directions whose explained variance covers
the requested threshold. The forward map projects onto those directions;
because they are orthonormal, the pseudo-inverse of the forward map is its
transpose, which is what reconstruction applies.

For the typical regime d >> M (feature dim up to ~1e6, a few hundred
training images) the fit goes through the M x M Gram matrix instead of an
SVD of the full M x d matrix, making it O(M^2 d).
"""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import dataclass

import numpy as np

from .tensor import FeatureBatch

# Singular values below this fraction of the largest are treated as rank zero.
RANK_CUTOFF = 1e-7

BUNDLE_MAGIC = b"FREB"
BUNDLE_VERSION = 1


class DegenerateDataError(ValueError):
    """Training rows are all identical: no variance to model."""


class BundleFormatError(ValueError):
    """Bundle file is corrupt or structurally invalid."""


class BundleVersionError(BundleFormatError):
    """Bundle was written by an incompatible format version."""


@dataclass(frozen=True)
class SubspaceModel:
    """Fitted PCA for one layer.

    components has orthonormal rows (m x d, rows = principal directions),
    singular_values is non-increasing and strictly positive.
    """

    layer_id: str
    feature_shape: tuple[int, int, int]
    mean: np.ndarray
    components: np.ndarray
    singular_values: np.ndarray
    variance_threshold: float
    retained_variance: float

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        comp = np.ascontiguousarray(self.components, dtype=np.float64)
        sv = np.ascontiguousarray(self.singular_values, dtype=np.float64)
        if comp.ndim != 2 or mean.ndim != 1 or comp.shape[1] != mean.shape[0]:
            raise ValueError("inconsistent mean/components shapes")
        if sv.shape != (comp.shape[0],):
            raise ValueError("one singular value per component required")
        if comp.shape[0] < 1:
            raise ValueError("need at least one component")
        if np.any(sv <= 0) or np.any(np.diff(sv) > 0):
            raise ValueError("singular values must be positive and non-increasing")
        for name, arr in (("mean", mean), ("components", comp), ("singular_values", sv)):
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
            arr.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comp)
        object.__setattr__(self, "singular_values", sv)
        object.__setattr__(self, "feature_shape", tuple(int(s) for s in self.feature_shape))
        # float32 copies for the inference hot path (residual computation)
        object.__setattr__(self, "_mean32", mean.astype(np.float32))
        object.__setattr__(self, "_components32", np.ascontiguousarray(comp, dtype=np.float32))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Orient each row so its largest-magnitude coordinate is positive.

    Ties resolve to the first index, keeping serialization deterministic.
    """
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit(batch: FeatureBatch, variance_threshold: float = 0.995) -> SubspaceModel:
    """Fit a PCA subspace capturing >= variance_threshold of row variance.

    Uses a thin SVD when d <= M, otherwise the Gram-matrix eigenproblem of
    the centered rows with components recovered as normalized projections.
    threshold 1.0 retains the full numerical rank.
    """
    if not 0.0 < variance_threshold <= 1.0:
        raise ValueError(f"variance threshold must be in (0, 1], got {variance_threshold}")
    x = batch.matrix.astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    m_rows, d = xc.shape

    if d <= m_rows:
        _, s, vt = np.linalg.svd(xc, full_matrices=False)
        components = vt
    else:
        gram = xc @ xc.T
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        evecs = evecs[:, order]
        s = np.sqrt(evals)
        # v_i = X_c^T u_i / s_i; division deferred until after the rank cut
        components = evecs.T @ xc

    rank = int(np.sum(s > RANK_CUTOFF * s[0])) if s.size and s[0] > 0 else 0
    if rank == 0:
        raise DegenerateDataError(
            f"layer {batch.layer_id!r}: all training rows identical, nothing to fit"
        )
    s = s[:rank]
    components = components[:rank]
    if d > m_rows:
        components = components / s[:, None]

    variances = s**2
    cumulative = np.cumsum(variances) / variances.sum()
    if variance_threshold >= 1.0:
        n_keep = rank
    else:
        n_keep = int(np.searchsorted(cumulative, variance_threshold) + 1)
        n_keep = min(n_keep, rank)

    # quantize through float32 so the .freb payload round-trips losslessly
    return SubspaceModel(
        layer_id=batch.layer_id,
        feature_shape=batch.feature_shape,
        mean=mean.astype(np.float32),
        components=_fix_signs(components[:n_keep]).astype(np.float32),
        singular_values=s[:n_keep].astype(np.float32),
        variance_threshold=float(variance_threshold),
        retained_variance=float(cumulative[n_keep - 1]),
    )


def transform(model: SubspaceModel, u: np.ndarray) -> np.ndarray:
    """Project a length-d vector into the subspace: components @ (u - mean)."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (model.dim,):
        raise ValueError(f"expected vector of length {model.dim}, got shape {u.shape}")
    return model.components @ (u - model.mean)


def reconstruct(model: SubspaceModel, z: np.ndarray) -> np.ndarray:
    """Map a reduced embedding back: components.T @ z + mean.

    The forward map has orthonormal rows, so its Moore-Penrose
    pseudo-inverse is exactly the transpose.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.n_components,):
        raise ValueError(f"expected vector of length {model.n_components}, got shape {z.shape}")
    return model.components.T @ z + model.mean


def residual(model: SubspaceModel, v: np.ndarray) -> np.ndarray:
    """Fused v - reconstruct(transform(v)) in float32.

    Single-precision with buffer reuse: the residual is the per-image hot
    path and this keeps its cost well under the backbone forward pass.
    Equivalent to the float64 composition within float32 rounding.
    """
    if v.shape != (model.dim,):
        raise ValueError(f"expected vector of length {model.dim}, got shape {v.shape}")
    centered = v.astype(np.float32, copy=True)
    centered -= model._mean32
    z = model._components32 @ centered
    np.subtract(centered, model._components32.T @ z, out=centered)
    return centered


@dataclass(frozen=True)
class ModelBundle:
    """Everything inference needs: per-layer models plus pipeline config."""

    backbone: str
    preprocess: dict
    models: dict  # layer_id -> SubspaceModel
    fusion_layers: tuple
    score_layer: str

    def __post_init__(self):
        fusion = tuple(self.fusion_layers)
        if not fusion:
            raise ValueError("fusion layer list must be nonempty")
        missing = [l for l in fusion if l not in self.models]
        if missing:
            raise ValueError(f"fusion layers missing from model map: {missing}")
        if self.score_layer not in self.models:
            raise ValueError(f"score layer {self.score_layer!r} missing from model map")
        object.__setattr__(self, "fusion_layers", fusion)


def _payload_blocks(model: SubspaceModel):
    yield "mean", model.mean.astype("<f4")
    yield "components", model.components.astype("<f4")
    yield "singular_values", model.singular_values.astype("<f4")


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write a .freb file: FREB magic, version, JSON header, float32 payload
    blocks, CRC32 trailer over the payload."""
    buf = io.BytesIO()
    layers = []
    for layer_id in sorted(bundle.models):
        model = bundle.models[layer_id]
        blocks = {}
        for name, arr in _payload_blocks(model):
            raw = arr.tobytes()
            blocks[name] = {"offset": buf.tell(), "length": len(raw), "shape": list(arr.shape)}
            buf.write(raw)
        layers.append(
            {
                "layer_id": layer_id,
                "feature_shape": list(model.feature_shape),
                "variance_threshold": model.variance_threshold,
                "retained_variance": model.retained_variance,
                "blocks": blocks,
            }
        )
    payload = buf.getvalue()
    header = {
        "backbone": bundle.backbone,
        "preprocess": bundle.preprocess,
        "fusion_layers": list(bundle.fusion_layers),
        "score_layer": bundle.score_layer,
        "layers": layers,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(BUNDLE_MAGIC)
        f.write(BUNDLE_VERSION.to_bytes(4, "little"))
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        f.write(payload)
        f.write(zlib.crc32(payload).to_bytes(4, "little"))


def load_bundle(path) -> ModelBundle:
    """Read a .freb file; raises BundleVersionError / BundleFormatError."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != BUNDLE_MAGIC:
        raise BundleFormatError(f"{path}: bad magic {blob[:4]!r}")
    version = int.from_bytes(blob[4:8], "little")
    if version != BUNDLE_VERSION:
        raise BundleVersionError(f"{path}: format version {version}, expected {BUNDLE_VERSION}")
    header_len = int.from_bytes(blob[8:16], "little")
    header_end = 16 + header_len
    if header_end + 4 > len(blob):
        raise BundleFormatError(f"{path}: truncated before payload")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"{path}: corrupt JSON header: {exc}") from exc
    payload = blob[header_end:-4]
    crc_stored = int.from_bytes(blob[-4:], "little")
    if zlib.crc32(payload) != crc_stored:
        raise BundleFormatError(f"{path}: payload CRC mismatch")

    def read_block(meta):
        off, length, shape = meta["offset"], meta["length"], tuple(meta["shape"])
        if off + length > len(payload):
            raise BundleFormatError(f"{path}: block exceeds payload")
        arr = np.frombuffer(payload[off : off + length], dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise BundleFormatError(f"{path}: block size/shape mismatch")
        return arr.reshape(shape)

    models = {}
    for layer in header["layers"]:
        blocks = layer["blocks"]
        models[layer["layer_id"]] = SubspaceModel(
            layer_id=layer["layer_id"],
            feature_shape=tuple(layer["feature_shape"]),
            mean=read_block(blocks["mean"]),
            components=read_block(blocks["components"]),
            singular_values=read_block(blocks["singular_values"]),
            variance_threshold=layer["variance_threshold"],
            retained_variance=layer["retained_variance"],
        )
    return ModelBundle(
        backbone=header["backbone"],
        preprocess=header["preprocess"],
        models=models,
        fusion_layers=tuple(header["fusion_layers"]),
        score_layer=header["score_layer"],
    )
