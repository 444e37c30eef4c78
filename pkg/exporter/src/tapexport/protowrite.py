"""ONNX protobuf serialization, written against the published wire format.

Only the message subset an inference graph needs: ModelProto, GraphProto,
NodeProto, AttributeProto (int/float/ints/floats), TensorProto (float32 /
int64 raw data), ValueInfoProto with static shapes. No onnx package
involved; the output is standard ONNX opset-13 readable by any runtime.
"""

from __future__ import annotations

import numpy as np

_VARINT = 0
_LENGTH = 2
_FIXED32 = 5


def _varint(n: int) -> bytes:
    out = bytearray()
    n &= (1 << 64) - 1
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _key(field: int, wire: int) -> bytes:
    return _varint((field << 3) | wire)


def _len_field(field: int, payload: bytes) -> bytes:
    return _key(field, _LENGTH) + _varint(len(payload)) + payload


def _varint_field(field: int, value: int) -> bytes:
    return _key(field, _VARINT) + _varint(value)


def _string_field(field: int, s: str) -> bytes:
    return _len_field(field, s.encode("utf-8"))


def tensor_proto(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    out = b""
    for d in arr.shape:
        out += _varint_field(1, int(d))
    if arr.dtype == np.float32:
        out += _varint_field(2, 1)  # FLOAT
        raw = arr.astype("<f4").tobytes()
    elif arr.dtype == np.int64:
        out += _varint_field(2, 7)  # INT64
        raw = arr.astype("<i8").tobytes()
    else:
        raise TypeError(f"initializer {name!r}: unsupported dtype {arr.dtype}")
    out += _string_field(8, name)
    out += _len_field(9, raw)
    return out


def _attribute(name: str, value) -> bytes:
    out = _string_field(1, name)
    if isinstance(value, bool):
        out += _varint_field(3, int(value)) + _varint_field(20, 2)
    elif isinstance(value, int):
        out += _varint_field(3, value) + _varint_field(20, 2)  # INT
    elif isinstance(value, float):
        out += _key(2, _FIXED32) + np.float32(value).tobytes() + _varint_field(20, 1)  # FLOAT
    elif isinstance(value, (list, tuple)) and all(isinstance(v, (int, np.integer)) for v in value):
        out += _len_field(8, b"".join(_varint(int(v)) for v in value)) + _varint_field(20, 7)
    elif isinstance(value, (list, tuple)) and all(isinstance(v, float) for v in value):
        out += _len_field(7, np.asarray(value, dtype="<f4").tobytes()) + _varint_field(20, 6)
    else:
        raise TypeError(f"attribute {name!r}: unsupported value {value!r}")
    return out


def node_proto(op_type: str, inputs, outputs, name: str = "", attrs: dict | None = None) -> bytes:
    out = b""
    for i in inputs:
        out += _string_field(1, i)
    for o in outputs:
        out += _string_field(2, o)
    out += _string_field(3, name or outputs[0])
    out += _string_field(4, op_type)
    for k, v in (attrs or {}).items():
        out += _len_field(5, _attribute(k, v))
    return out


def value_info(name: str, shape) -> bytes:
    dims = b""
    for d in shape:
        dims += _len_field(1, _varint_field(1, int(d)))
    tensor_type = _varint_field(1, 1) + _len_field(2, dims)  # elem_type FLOAT
    return _string_field(1, name) + _len_field(2, _len_field(1, tensor_type))


def model_proto(
    nodes: list[bytes],
    inputs: list,          # (name, shape)
    outputs: list,         # (name, shape)
    initializers: list,    # (name, ndarray)
    opset: int = 13,
    graph_name: str = "graph",
    producer: str = "tapexport",
) -> bytes:
    graph = b""
    for n in nodes:
        graph += _len_field(1, n)
    graph += _string_field(2, graph_name)
    for name, arr in initializers:
        graph += _len_field(5, tensor_proto(name, arr))
    for name, shape in inputs:
        graph += _len_field(11, value_info(name, shape))
    for name, shape in outputs:
        graph += _len_field(12, value_info(name, shape))
    model = _varint_field(1, 8)  # ir_version 8
    model += _string_field(2, producer)
    model += _len_field(7, graph)
    model += _len_field(8, _string_field(1, "") + _varint_field(2, opset))
    return model
