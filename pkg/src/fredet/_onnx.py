"""Minimal ONNX model reader and CPU executor.

Parses the ONNX protobuf wire format directly (the subset the offline
exporter emits: ModelProto/GraphProto/NodeProto/AttributeProto/TensorProto
with float32/int64 tensors) and evaluates graphs with numpy. Convolutions
go through im2col + GEMM; grouped convolutions through a windowed einsum.

Supported operators: Conv, BatchNormalization, Relu, Sigmoid, Add, Mul,
MaxPool, AveragePool, GlobalAveragePool, Gemm, Flatten, Identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class OnnxParseError(ValueError):
    """Blob is not a parseable ONNX model (for this subset)."""


class UnsupportedOperatorError(ValueError):
    """Graph uses an operator or attribute this executor does not implement."""


class GraphExecutionError(ValueError):
    """Graph is structurally unexecutable (missing tensors, bad order)."""


# ---------------------------------------------------------------------------
# protobuf wire decoding

_VARINT = 0
_FIXED64 = 1
_LENGTH = 2
_FIXED32 = 5


def _read_varint(buf: bytes, pos: int):
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise OnnxParseError("truncated varint")
        b = buf[pos]
        result |= (b & 0x7F) << shift
        pos += 1
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise OnnxParseError("varint too long")


def _iter_fields(buf: bytes):
    """Yield (field_number, wire_type, value) triples of one message."""
    pos = 0
    while pos < len(buf):
        key, pos = _read_varint(buf, pos)
        field_no, wire = key >> 3, key & 0x7
        if wire == _VARINT:
            value, pos = _read_varint(buf, pos)
        elif wire == _LENGTH:
            length, pos = _read_varint(buf, pos)
            if pos + length > len(buf):
                raise OnnxParseError("truncated length-delimited field")
            value = buf[pos : pos + length]
            pos += length
        elif wire == _FIXED64:
            value = buf[pos : pos + 8]
            pos += 8
        elif wire == _FIXED32:
            value = buf[pos : pos + 4]
            pos += 4
        else:
            raise OnnxParseError(f"unsupported wire type {wire}")
        yield field_no, wire, value


def _signed(value: int) -> int:
    # protobuf int64 varints are two's complement in 64 bits
    return value - (1 << 64) if value >= (1 << 63) else value


def _packed_varints(blob: bytes):
    pos = 0
    out = []
    while pos < len(blob):
        v, pos = _read_varint(blob, pos)
        out.append(_signed(v))
    return out


# ---------------------------------------------------------------------------
# ONNX message subset

_FLOAT = 1
_INT64 = 7


def _parse_tensor(blob: bytes) -> tuple[str, np.ndarray]:
    dims: list[int] = []
    data_type = _FLOAT
    raw = b""
    floats: list[float] = []
    int64s: list[int] = []
    name = ""
    for field_no, wire, value in _iter_fields(blob):
        if field_no == 1:
            dims.append(_signed(value) if wire == _VARINT else 0)
        elif field_no == 2:
            data_type = value
        elif field_no == 4:  # packed float_data
            floats.extend(np.frombuffer(value, dtype="<f4"))
        elif field_no == 7:  # packed int64_data
            int64s.extend(_packed_varints(value))
        elif field_no == 8:
            name = value.decode("utf-8")
        elif field_no == 9:
            raw = value
    shape = tuple(dims)
    if data_type == _FLOAT:
        arr = np.frombuffer(raw, dtype="<f4") if raw else np.asarray(floats, dtype=np.float32)
    elif data_type == _INT64:
        arr = np.frombuffer(raw, dtype="<i8") if raw else np.asarray(int64s, dtype=np.int64)
    else:
        raise OnnxParseError(f"initializer {name!r}: unsupported data type {data_type}")
    if arr.size != int(np.prod(shape)):
        raise OnnxParseError(f"initializer {name!r}: payload does not match dims {shape}")
    return name, arr.reshape(shape)


def _parse_attribute(blob: bytes):
    name = ""
    a_type = 0
    f_val = 0.0
    i_val = 0
    s_val = b""
    floats: list[float] = []
    ints: list[int] = []
    tensor = None
    for field_no, wire, value in _iter_fields(blob):
        if field_no == 1:
            name = value.decode("utf-8")
        elif field_no == 2:
            f_val = float(np.frombuffer(value, dtype="<f4")[0])
        elif field_no == 3:
            i_val = _signed(value)
        elif field_no == 4:
            s_val = value
        elif field_no == 5:
            tensor = _parse_tensor(value)[1]
        elif field_no == 7:
            if wire == _LENGTH and len(value) % 4 == 0 and len(value) > 0:
                floats.extend(np.frombuffer(value, dtype="<f4"))
            else:
                floats.append(float(np.frombuffer(value, dtype="<f4")[0]))
        elif field_no == 8:
            if wire == _VARINT:
                ints.append(_signed(value))
            else:
                ints.extend(_packed_varints(value))
        elif field_no == 20:
            a_type = value
    by_type = {1: f_val, 2: i_val, 3: s_val.decode("utf-8", "replace"), 4: tensor, 6: floats, 7: ints}
    if a_type not in by_type:
        raise OnnxParseError(f"attribute {name!r}: unsupported attribute type {a_type}")
    return name, by_type[a_type]


@dataclass
class OnnxNode:
    op_type: str
    name: str
    inputs: list[str]
    outputs: list[str]
    attrs: dict


def _parse_value_info(blob: bytes):
    """Return (name, shape tuple or None)."""
    name = ""
    shape = None
    for field_no, _, value in _iter_fields(blob):
        if field_no == 1:
            name = value.decode("utf-8")
        elif field_no == 2:  # TypeProto
            for f2, _, v2 in _iter_fields(value):
                if f2 != 1:  # tensor_type
                    continue
                for f3, _, v3 in _iter_fields(v2):
                    if f3 != 2:  # shape
                        continue
                    dims = []
                    for f4, _, v4 in _iter_fields(v3):
                        if f4 == 1:  # Dimension
                            dim_value = None
                            for f5, w5, v5 in _iter_fields(v4):
                                if f5 == 1 and w5 == _VARINT:
                                    dim_value = _signed(v5)
                            dims.append(dim_value)
                    shape = tuple(dims)
    return name, shape


def _parse_node(blob: bytes) -> OnnxNode:
    node = OnnxNode(op_type="", name="", inputs=[], outputs=[], attrs={})
    for field_no, _, value in _iter_fields(blob):
        if field_no == 1:
            node.inputs.append(value.decode("utf-8"))
        elif field_no == 2:
            node.outputs.append(value.decode("utf-8"))
        elif field_no == 3:
            node.name = value.decode("utf-8")
        elif field_no == 4:
            node.op_type = value.decode("utf-8")
        elif field_no == 5:
            k, v = _parse_attribute(value)
            node.attrs[k] = v
    return node


@dataclass
class OnnxModel:
    ir_version: int
    opset: int
    nodes: list[OnnxNode]
    initializers: dict
    inputs: list          # (name, shape) with initializers excluded
    outputs: list         # names
    value_shapes: dict    # declared shapes incl. value_info

    def producible(self) -> set:
        names = set(self.initializers)
        names.update(name for name, _ in self.inputs)
        for node in self.nodes:
            names.update(node.outputs)
        return names


def parse_model(blob: bytes) -> OnnxModel:
    if not blob:
        raise OnnxParseError("empty model file")
    ir_version = 0
    opset = 0
    graph_blob = None
    try:
        for field_no, wire, value in _iter_fields(blob):
            if field_no == 1 and wire == _VARINT:
                ir_version = _signed(value)
            elif field_no == 7:
                graph_blob = value
            elif field_no == 8:
                for f2, w2, v2 in _iter_fields(value):
                    if f2 == 2 and w2 == _VARINT:
                        opset = max(opset, _signed(v2))
    except OnnxParseError:
        raise
    except Exception as exc:  # defensive: arbitrary bytes
        raise OnnxParseError(f"not an ONNX model: {exc}") from exc
    if graph_blob is None:
        raise OnnxParseError("model has no graph")

    nodes = []
    initializers = {}
    inputs = []
    outputs = []
    value_shapes = {}
    for field_no, _, value in _iter_fields(graph_blob):
        if field_no == 1:
            nodes.append(_parse_node(value))
        elif field_no == 5:
            name, arr = _parse_tensor(value)
            initializers[name] = arr
        elif field_no == 11:
            name, shape = _parse_value_info(value)
            inputs.append((name, shape))
        elif field_no == 12:
            name, shape = _parse_value_info(value)
            outputs.append(name)
            value_shapes[name] = shape
        elif field_no == 13:
            name, shape = _parse_value_info(value)
            value_shapes[name] = shape
    inputs = [(n, s) for n, s in inputs if n not in initializers]
    if not nodes:
        raise OnnxParseError("graph has no nodes")
    return OnnxModel(
        ir_version=ir_version,
        opset=opset,
        nodes=nodes,
        initializers=initializers,
        inputs=inputs,
        outputs=outputs,
        value_shapes=value_shapes,
    )


def load_model(path) -> OnnxModel:
    with open(path, "rb") as f:
        return parse_model(f.read())


# ---------------------------------------------------------------------------
# executor

def _pair(attr, default):
    if attr is None:
        return (default, default)
    if len(attr) == 1:
        return (int(attr[0]), int(attr[0]))
    return (int(attr[0]), int(attr[1]))


def _conv_windows(x, kh, kw, sh, sw, ph, pw, pad_value=0.0):
    """Pad and extract strided (kh, kw) windows: (N, C, Ho, Wo, kh, kw)."""
    if ph or pw:
        x = np.pad(
            x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="constant", constant_values=pad_value
        )
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def _op_conv(node, x, w, b=None):
    attrs = node.attrs
    if attrs.get("auto_pad", "NOTSET") not in ("", "NOTSET"):
        raise UnsupportedOperatorError(f"{node.name}: auto_pad not supported")
    dil = attrs.get("dilations")
    if dil is not None and any(d != 1 for d in dil):
        raise UnsupportedOperatorError(f"{node.name}: dilation != 1 not supported")
    groups = int(attrs.get("group", 1))
    kh, kw = _pair(attrs.get("kernel_shape"), w.shape[2])
    sh, sw = _pair(attrs.get("strides"), 1)
    pads = attrs.get("pads")
    if pads is None:
        ph0 = pw0 = ph1 = pw1 = 0
    else:
        ph0, pw0, ph1, pw1 = (int(p) for p in pads)
    if ph0 != ph1 or pw0 != pw1:
        raise UnsupportedOperatorError(f"{node.name}: asymmetric padding not supported")

    x = np.ascontiguousarray(x, dtype=np.float32)
    w = np.ascontiguousarray(w, dtype=np.float32)
    n, c_in = x.shape[0], x.shape[1]
    c_out = w.shape[0]
    win = _conv_windows(x, kh, kw, sh, sw, ph0, pw0)
    n_, _, ho, wo, _, _ = win.shape
    if groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
        out = cols @ w.reshape(c_out, -1).T
        out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    else:
        if c_in % groups or c_out % groups:
            raise GraphExecutionError(f"{node.name}: channels not divisible by groups")
        cg = c_in // groups
        win_g = win.reshape(n, groups, cg, ho, wo, kh, kw)
        w_g = w.reshape(groups, c_out // groups, cg, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", win_g, w_g, optimize=True)
        out = out.reshape(n, c_out, ho, wo)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out, dtype=np.float32)


def _op_batchnorm(node, x, scale, bias, mean, var):
    eps = float(node.attrs.get("epsilon", 1e-5))
    a = scale / np.sqrt(var + eps)
    b = bias - mean * a
    return (x * a.reshape(1, -1, 1, 1) + b.reshape(1, -1, 1, 1)).astype(np.float32)


def _op_maxpool(node, x):
    attrs = node.attrs
    if int(attrs.get("ceil_mode", 0)):
        raise UnsupportedOperatorError(f"{node.name}: ceil_mode not supported")
    kh, kw = _pair(attrs["kernel_shape"], 1)
    sh, sw = _pair(attrs.get("strides"), 1)
    pads = attrs.get("pads")
    ph, pw = (0, 0) if pads is None else (int(pads[0]), int(pads[1]))
    win = _conv_windows(x, kh, kw, sh, sw, ph, pw, pad_value=-np.inf)
    return np.ascontiguousarray(win.max(axis=(4, 5)), dtype=np.float32)


def _op_avgpool(node, x):
    attrs = node.attrs
    pads = attrs.get("pads")
    if pads is not None and any(int(p) for p in pads):
        raise UnsupportedOperatorError(f"{node.name}: padded AveragePool not supported")
    if int(attrs.get("ceil_mode", 0)):
        raise UnsupportedOperatorError(f"{node.name}: ceil_mode not supported")
    kh, kw = _pair(attrs["kernel_shape"], 1)
    sh, sw = _pair(attrs.get("strides"), 1)
    win = _conv_windows(x, kh, kw, sh, sw, 0, 0)
    return np.ascontiguousarray(win.mean(axis=(4, 5)), dtype=np.float32)


def _op_gemm(node, x, w, b=None):
    attrs = node.attrs
    if attrs.get("alpha", 1.0) != 1.0 or attrs.get("beta", 1.0) != 1.0:
        raise UnsupportedOperatorError(f"{node.name}: Gemm alpha/beta != 1 not supported")
    if int(attrs.get("transA", 0)):
        raise UnsupportedOperatorError(f"{node.name}: Gemm transA not supported")
    if int(attrs.get("transB", 0)):
        w = w.T
    out = x @ w
    if b is not None:
        out = out + b
    return out.astype(np.float32)


def _op_flatten(node, x):
    axis = int(node.attrs.get("axis", 1))
    lead = int(np.prod(x.shape[:axis])) if axis > 0 else 1
    return np.ascontiguousarray(x.reshape(lead, -1))


class Executor:
    """Evaluates a parsed graph on numpy inputs, batch dimension included."""

    def __init__(self, model: OnnxModel):
        self.model = model
        producible = model.producible()
        for node in model.nodes:
            for name in node.inputs:
                if name and name not in producible:
                    raise GraphExecutionError(
                        f"node {node.name or node.op_type!r}: input {name!r} never produced"
                    )

    def run(self, feeds: dict, outputs: list[str]) -> dict:
        values = dict(self.model.initializers)
        values.update(feeds)
        missing = [n for n, _ in self.model.inputs if n not in values]
        if missing:
            raise GraphExecutionError(f"missing graph inputs: {missing}")
        wanted = set(outputs)
        available = self.model.producible() | set(feeds)
        unknown = wanted - available
        if unknown:
            raise GraphExecutionError(f"requested tensors not in graph: {sorted(unknown)}")

        # free intermediates after their last consumer to bound peak memory
        remaining_uses: dict = {}
        for node in self.model.nodes:
            for name in node.inputs:
                if name:
                    remaining_uses[name] = remaining_uses.get(name, 0) + 1

        keep = wanted | set(self.model.initializers) | set(feeds)
        for node in self.model.nodes:
            args = []
            for name in node.inputs:
                if name == "":
                    args.append(None)
                    continue
                if name not in values:
                    raise GraphExecutionError(
                        f"node {node.name or node.op_type!r}: input {name!r} not yet computed "
                        "(graph not topologically ordered?)"
                    )
                args.append(values[name])
            results = self._dispatch(node, args)
            for out_name, result in zip(node.outputs, results):
                if out_name:
                    values[out_name] = result
            for name in node.inputs:
                if name and name not in keep:
                    remaining_uses[name] -= 1
                    if remaining_uses[name] == 0:
                        values.pop(name, None)
        missing_outputs = wanted - set(values)
        if missing_outputs:
            raise GraphExecutionError(f"outputs never produced: {sorted(missing_outputs)}")
        return {name: values[name] for name in outputs}

    def _dispatch(self, node: OnnxNode, args: list):
        op = node.op_type
        if op == "Conv":
            return [_op_conv(node, *args)]
        if op == "BatchNormalization":
            return [_op_batchnorm(node, *args[:5])]
        if op == "Relu":
            return [np.maximum(args[0], 0.0).astype(np.float32)]
        if op == "Sigmoid":
            x = np.asarray(args[0], dtype=np.float64)
            return [(1.0 / (1.0 + np.exp(-x))).astype(np.float32)]
        if op == "Add":
            return [(args[0] + args[1]).astype(np.float32)]
        if op == "Mul":
            return [(args[0] * args[1]).astype(np.float32)]
        if op == "MaxPool":
            return [_op_maxpool(node, args[0])]
        if op == "AveragePool":
            return [_op_avgpool(node, args[0])]
        if op == "GlobalAveragePool":
            return [args[0].mean(axis=(2, 3), keepdims=True).astype(np.float32)]
        if op == "Gemm":
            return [_op_gemm(node, *args)]
        if op == "Flatten":
            return [_op_flatten(node, args[0])]
        if op == "Identity":
            return [args[0]]
        raise UnsupportedOperatorError(f"operator {op!r} not supported")
