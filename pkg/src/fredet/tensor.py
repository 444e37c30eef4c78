"""Core tensor containers and the NPY v1.0 on-disk format.

Everything downstream (subspace fitting, scoring, the feature-directory
pipeline) moves data through these types. Layout is fixed channel-major
(C, H, W) and float32 throughout; files are NPY v1.0 little-endian so the
offline exporter and this library read each other's dumps byte-for-byte.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field

import numpy as np

NPY_MAGIC = b"\x93NUMPY"


class NpyError(ValueError):
    """Base class for NPY format violations."""


class NpyMagicError(NpyError):
    """File does not start with the NPY magic string or version (1, 0)."""


class NpyHeaderError(NpyError):
    """Header dict is malformed or carries unsupported flags."""


class NpyDtypeError(NpyError):
    """Stored dtype is not little-endian float32."""


class NpyTruncatedError(NpyError):
    """Payload is shorter than the header's shape demands."""


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class FeatureTensor:
    """One layer's activation for one input, shape (C, H, W) float32."""

    layer_id: str
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"feature tensor must be rank 3 (C,H,W), got shape {arr.shape}")
        _check_finite(arr, "feature tensor")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class FeatureBatch:
    """Vectorized features of M inputs for one layer: an M x d row matrix.

    d = C*H*W per the recorded feature_shape; each row is a channel-major
    flattened FeatureTensor. Two rows minimum: a subspace cannot be centered
    and fitted on fewer.
    """

    layer_id: str
    matrix: np.ndarray
    feature_shape: tuple[int, int, int]

    def __post_init__(self):
        mat = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if mat.ndim != 2:
            raise ValueError(f"batch matrix must be rank 2, got shape {mat.shape}")
        if mat.shape[0] < 2:
            raise ValueError(f"batch needs M >= 2 rows, got {mat.shape[0]}")
        c, h, w = self.feature_shape
        if c * h * w != mat.shape[1]:
            raise ValueError(
                f"row length {mat.shape[1]} inconsistent with feature shape {self.feature_shape}"
            )
        _check_finite(mat, "feature batch")
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "feature_shape", (int(c), int(h), int(w)))

    @property
    def count(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_tensors(cls, tensors: list[FeatureTensor]) -> "FeatureBatch":
        if len(tensors) < 2:
            raise ValueError("need at least two feature tensors to form a batch")
        shape = tensors[0].shape
        layer = tensors[0].layer_id
        for t in tensors[1:]:
            if t.shape != shape:
                raise ValueError(f"feature shape drift: {t.shape} vs {shape}")
            if t.layer_id != layer:
                raise ValueError(f"mixed layers in batch: {t.layer_id!r} vs {layer!r}")
        mat = np.stack([vectorize(t) for t in tensors])
        return cls(layer_id=layer, matrix=mat, feature_shape=shape)


# Resolution tags for AnomalyMap.
NATIVE = "native"          # at the layer grid H_k x W_k
INPUT_RES = "input"        # resized to the input image H x W


@dataclass(frozen=True)
class AnomalyMap:
    """Single-channel H x W heatmap; higher means more anomalous."""

    data: np.ndarray
    resolution: str = NATIVE

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"anomaly map must be rank 2, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]


def vectorize(t: FeatureTensor) -> np.ndarray:
    """Flatten (C, H, W) channel-major into a length C*H*W row vector."""
    return t.data.reshape(-1)


def devectorize(v: np.ndarray, shape: tuple[int, int, int], layer_id: str = "") -> FeatureTensor:
    """Inverse of vectorize; bit-exact round trip."""
    v = np.asarray(v, dtype=np.float32)
    c, h, w = shape
    if v.size != c * h * w:
        raise ValueError(f"vector length {v.size} does not match shape {shape}")
    return FeatureTensor(layer_id=layer_id, data=v.reshape(c, h, w))


def _format_shape(shape: tuple[int, ...]) -> str:
    if len(shape) == 1:
        return f"({shape[0]},)"
    return "(" + ", ".join(str(s) for s in shape) + ")"


def save_npy(path, array: np.ndarray) -> None:
    """Write a float32 C-order array as NPY v1.0.

    Header is the canonical dict string padded with spaces so that the
    total preamble length is a multiple of 64, newline terminated.
    """
    arr = np.ascontiguousarray(array, dtype=np.float32)
    header = (
        "{'descr': '<f4', 'fortran_order': False, "
        f"'shape': {_format_shape(arr.shape)}, }}"
    )
    # 6 magic + 2 version + 2 header-length prefix
    unpadded = len(NPY_MAGIC) + 2 + 2 + len(header) + 1
    pad = (64 - unpadded % 64) % 64
    header = header + " " * pad + "\n"
    with open(path, "wb") as f:
        f.write(NPY_MAGIC)
        f.write(b"\x01\x00")
        f.write(len(header).to_bytes(2, "little"))
        f.write(header.encode("latin1"))
        f.write(arr.tobytes())


def load_npy(path, layer_id: str = ""):
    """Read an NPY v1.0 float32 file.

    Returns a FeatureTensor for rank-3 payloads, a FeatureBatch for rank-2
    (feature shape defaulting to (d, 1, 1)), and the bare ndarray otherwise.
    Raises a distinct NpyError subclass per violation: bad magic/version,
    malformed header, wrong dtype, truncated payload.
    """
    arr = load_npy_array(path)
    if arr.ndim == 3:
        return FeatureTensor(layer_id=layer_id, data=arr)
    if arr.ndim == 2:
        return FeatureBatch(layer_id=layer_id, matrix=arr, feature_shape=(arr.shape[1], 1, 1))
    return arr


def load_npy_array(path) -> np.ndarray:
    """Read an NPY v1.0 float32 file as a raw ndarray (any rank)."""
    with open(path, "rb") as f:
        magic = f.read(6)
        if magic != NPY_MAGIC:
            raise NpyMagicError(f"{path}: bad magic {magic!r}")
        version = f.read(2)
        if version != b"\x01\x00":
            raise NpyMagicError(f"{path}: unsupported NPY version {tuple(version)}")
        raw_len = f.read(2)
        if len(raw_len) != 2:
            raise NpyHeaderError(f"{path}: header length field missing")
        header_len = int.from_bytes(raw_len, "little")
        header_bytes = f.read(header_len)
        if len(header_bytes) != header_len:
            raise NpyHeaderError(f"{path}: header shorter than declared ({header_len})")
        try:
            header = ast.literal_eval(header_bytes.decode("latin1"))
        except (ValueError, SyntaxError) as exc:
            raise NpyHeaderError(f"{path}: unparseable header: {exc}") from exc
        if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= set(header):
            raise NpyHeaderError(f"{path}: header missing required keys")
        if header["descr"] != "<f4":
            raise NpyDtypeError(f"{path}: dtype {header['descr']!r}, require '<f4'")
        if header["fortran_order"]:
            raise NpyHeaderError(f"{path}: fortran_order=True not supported")
        shape = tuple(int(s) for s in header["shape"])
        count = int(np.prod(shape)) if shape else 1
        payload = f.read(count * 4)
        if len(payload) < count * 4:
            raise NpyTruncatedError(
                f"{path}: payload has {len(payload)} bytes, need {count * 4} for shape {shape}"
            )
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    arr = np.ascontiguousarray(arr)
    _check_finite(arr, f"{path}")
    return arr
