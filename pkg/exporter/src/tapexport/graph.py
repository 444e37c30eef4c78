"""torch.fx graph to ONNX node conversion.

The conversion walks a feature-extractor GraphModule (shape-propagated so
every node carries its tensor shape) and emits one ONNX node per aten/
module op, expanding torchvision composites (Conv2dNormActivation,
SqueezeExcitation) into primitive ops and collapsing eval-time no-ops
(Dropout, Identity, StochasticDepth) into tensor aliases.
"""

from __future__ import annotations

import math
import operator

import numpy as np
import torch
from torch import nn
from torchvision.ops.misc import Conv2dNormActivation, SqueezeExcitation
from torchvision.ops.stochastic_depth import StochasticDepth

from . import protowrite as pw


class ConversionError(ValueError):
    pass


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


class GraphBuilder:
    """Accumulates ONNX nodes/initializers with unique tensor names."""

    def __init__(self):
        self.nodes: list[bytes] = []
        self.initializers: list = []
        self._names: set[str] = set()

    def fresh(self, base: str) -> str:
        name = base
        i = 0
        while name in self._names:
            i += 1
            name = f"{base}_{i}"
        self._names.add(name)
        return name

    def initializer(self, base: str, tensor: torch.Tensor) -> str:
        name = self.fresh(base)
        self.initializers.append((name, tensor.detach().cpu().numpy().astype(np.float32)))
        return name

    def node(self, op: str, inputs: list[str], out_base: str, attrs: dict | None = None) -> str:
        out = self.fresh(out_base)
        self.nodes.append(pw.node_proto(op, inputs, [out], name=out, attrs=attrs))
        return out


def _adaptive_pool_params(in_hw, out_hw):
    """Map adaptive average pooling to a fixed kernel/stride, when uniform."""
    kernels, strides = [], []
    for in_size, out_size in zip(in_hw, out_hw):
        starts = [math.floor(i * in_size / out_size) for i in range(out_size)]
        ends = [math.ceil((i + 1) * in_size / out_size) for i in range(out_size)]
        sizes = {e - s for s, e in zip(starts, ends)}
        steps = {b - a for a, b in zip(starts, starts[1:])} or {1}
        if len(sizes) != 1 or len(steps) != 1:
            raise ConversionError(
                f"adaptive pooling {in_size}->{out_size} has non-uniform windows"
            )
        kernels.append(sizes.pop())
        strides.append(steps.pop())
    return kernels, strides


def _in_shape(node) -> tuple:
    src = node.args[0]
    meta = getattr(src, "meta", {}).get("tensor_meta")
    if meta is None:
        raise ConversionError(f"missing shape metadata on input of {node.name!r}")
    return tuple(meta.shape)


class _Converter:
    def __init__(self, gm: torch.fx.GraphModule, input_name: str = "input"):
        self.gm = gm
        self.b = GraphBuilder()
        self.b._names.add(input_name)
        self.tensor_of: dict = {}  # fx Node -> ONNX tensor name
        self.input_name = input_name
        self.output_map: dict = {}  # user key -> ONNX tensor name

    # --- module emission ------------------------------------------------

    def emit_conv(self, mod: nn.Conv2d, x: str, prefix: str) -> str:
        if _pair(mod.dilation) != (1, 1):
            raise ConversionError(f"{prefix}: dilated convolution not supported")
        if isinstance(mod.padding, str):
            raise ConversionError(f"{prefix}: string padding not supported")
        ph, pw_ = _pair(mod.padding)
        sh, sw = _pair(mod.stride)
        kh, kw = _pair(mod.kernel_size)
        inputs = [x, self.b.initializer(f"{prefix}.weight", mod.weight)]
        if mod.bias is not None:
            inputs.append(self.b.initializer(f"{prefix}.bias", mod.bias))
        return self.b.node(
            "Conv",
            inputs,
            prefix,
            attrs={
                "kernel_shape": [kh, kw],
                "strides": [sh, sw],
                "pads": [ph, pw_, ph, pw_],
                "group": int(mod.groups),
                "dilations": [1, 1],
            },
        )

    def emit_batchnorm(self, mod: nn.BatchNorm2d, x: str, prefix: str) -> str:
        inputs = [
            x,
            self.b.initializer(f"{prefix}.weight", mod.weight),
            self.b.initializer(f"{prefix}.bias", mod.bias),
            self.b.initializer(f"{prefix}.running_mean", mod.running_mean),
            self.b.initializer(f"{prefix}.running_var", mod.running_var),
        ]
        return self.b.node(
            "BatchNormalization", inputs, prefix, attrs={"epsilon": float(mod.eps)}
        )

    def emit_silu(self, x: str, prefix: str) -> str:
        sig = self.b.node("Sigmoid", [x], f"{prefix}.sigmoid")
        return self.b.node("Mul", [x, sig], prefix)

    def emit_maxpool(self, mod: nn.MaxPool2d, x: str, prefix: str) -> str:
        if _pair(mod.dilation) != (1, 1):
            raise ConversionError(f"{prefix}: dilated pooling not supported")
        if mod.ceil_mode:
            raise ConversionError(f"{prefix}: ceil_mode pooling not supported")
        kh, kw = _pair(mod.kernel_size)
        sh, sw = _pair(mod.stride if mod.stride is not None else mod.kernel_size)
        ph, pw_ = _pair(mod.padding)
        return self.b.node(
            "MaxPool",
            [x],
            prefix,
            attrs={"kernel_shape": [kh, kw], "strides": [sh, sw], "pads": [ph, pw_, ph, pw_]},
        )

    def emit_adaptive_avgpool(self, mod: nn.AdaptiveAvgPool2d, node, x: str, prefix: str) -> str:
        out_hw = _pair(mod.output_size if mod.output_size is not None else 1)
        in_shape = _in_shape(node)
        in_hw = (int(in_shape[2]), int(in_shape[3]))
        if out_hw == (1, 1):
            return self.b.node("GlobalAveragePool", [x], prefix)
        if in_hw == out_hw:
            return x  # identity
        kernels, strides = _adaptive_pool_params(in_hw, out_hw)
        return self.b.node(
            "AveragePool", [x], prefix, attrs={"kernel_shape": kernels, "strides": strides}
        )

    def emit_linear(self, mod: nn.Linear, x: str, prefix: str) -> str:
        inputs = [x, self.b.initializer(f"{prefix}.weight", mod.weight)]
        if mod.bias is not None:
            inputs.append(self.b.initializer(f"{prefix}.bias", mod.bias))
        return self.b.node("Gemm", inputs, prefix, attrs={"transB": 1})

    def emit_squeeze_excitation(self, mod: SqueezeExcitation, x: str, prefix: str) -> str:
        pooled = self.b.node("GlobalAveragePool", [x], f"{prefix}.avgpool")
        h = self.emit_conv(mod.fc1, pooled, f"{prefix}.fc1")
        h = self.emit_activation(mod.activation, h, f"{prefix}.activation")
        h = self.emit_conv(mod.fc2, h, f"{prefix}.fc2")
        scale = self.emit_activation(mod.scale_activation, h, f"{prefix}.scale")
        return self.b.node("Mul", [scale, x], prefix)

    def emit_activation(self, mod: nn.Module, x: str, prefix: str) -> str:
        if isinstance(mod, nn.ReLU):
            return self.b.node("Relu", [x], prefix)
        if isinstance(mod, nn.SiLU):
            return self.emit_silu(x, prefix)
        if isinstance(mod, nn.Sigmoid):
            return self.b.node("Sigmoid", [x], prefix)
        raise ConversionError(f"{prefix}: unsupported activation {type(mod).__name__}")

    def emit_module(self, mod: nn.Module, node, x: str, prefix: str) -> str:
        if isinstance(mod, nn.Conv2d):
            return self.emit_conv(mod, x, prefix)
        if isinstance(mod, nn.BatchNorm2d):
            return self.emit_batchnorm(mod, x, prefix)
        if isinstance(mod, (nn.ReLU, nn.SiLU, nn.Sigmoid)):
            return self.emit_activation(mod, x, prefix)
        if isinstance(mod, nn.MaxPool2d):
            return self.emit_maxpool(mod, x, prefix)
        if isinstance(mod, nn.AdaptiveAvgPool2d):
            return self.emit_adaptive_avgpool(mod, node, x, prefix)
        if isinstance(mod, nn.Linear):
            return self.emit_linear(mod, x, prefix)
        if isinstance(mod, nn.Flatten):
            return self.b.node("Flatten", [x], prefix, attrs={"axis": int(mod.start_dim)})
        if isinstance(mod, SqueezeExcitation):
            return self.emit_squeeze_excitation(mod, x, prefix)
        if isinstance(mod, Conv2dNormActivation):
            h = x
            for child_name, child in mod.named_children():
                h = self.emit_module(child, node, h, f"{prefix}.{child_name}")
            return h
        if isinstance(mod, (nn.Dropout, nn.Identity, StochasticDepth)):
            return x  # eval-time no-op
        raise ConversionError(f"{prefix}: unsupported module {type(mod).__name__}")

    # --- graph walk -------------------------------------------------------

    def tensor(self, arg) -> str:
        if isinstance(arg, torch.fx.Node):
            return self.tensor_of[arg]
        raise ConversionError(f"non-tensor argument {arg!r} where a tensor is required")

    def convert(self) -> None:
        for node in self.gm.graph.nodes:
            if node.op == "placeholder":
                self.tensor_of[node] = self.input_name
            elif node.op == "call_module":
                mod = self.gm.get_submodule(node.target)
                x = self.tensor(node.args[0])
                self.tensor_of[node] = self.emit_module(mod, node, x, str(node.target))
            elif node.op == "call_function":
                self.tensor_of[node] = self.emit_function(node)
            elif node.op == "call_method":
                self.tensor_of[node] = self.emit_method(node)
            elif node.op == "output":
                result = node.args[0]
                if not isinstance(result, dict):
                    raise ConversionError("expected a dict-output feature extractor graph")
                self.output_map = {key: self.tensor(val) for key, val in result.items()}
            elif node.op == "get_attr":
                raise ConversionError(f"get_attr node {node.name!r} not supported")
        if not self.output_map:
            raise ConversionError("graph has no outputs")

    def emit_function(self, node) -> str:
        fn = node.target
        if fn in (operator.add, torch.add, operator.iadd):
            a, b_arg = node.args[:2]
            return self.b.node("Add", [self.tensor(a), self.tensor(b_arg)], node.name)
        if fn in (operator.mul, torch.mul):
            a, b_arg = node.args[:2]
            return self.b.node("Mul", [self.tensor(a), self.tensor(b_arg)], node.name)
        if fn is torch.flatten:
            axis = node.args[1] if len(node.args) > 1 else node.kwargs.get("start_dim", 0)
            return self.b.node(
                "Flatten", [self.tensor(node.args[0])], node.name, attrs={"axis": int(axis)}
            )
        if fn is torch.nn.functional.relu:
            return self.b.node("Relu", [self.tensor(node.args[0])], node.name)
        raise ConversionError(f"unsupported function {fn!r} at node {node.name!r}")

    def emit_method(self, node) -> str:
        if node.target == "flatten":
            axis = node.args[1] if len(node.args) > 1 else node.kwargs.get("start_dim", 0)
            return self.b.node(
                "Flatten", [self.tensor(node.args[0])], node.name, attrs={"axis": int(axis)}
            )
        raise ConversionError(f"unsupported method {node.target!r} at node {node.name!r}")


def convert_graph(gm: torch.fx.GraphModule, input_name: str = "input"):
    """Convert a shape-propagated GraphModule; returns (builder, output_map)."""
    conv = _Converter(gm, input_name=input_name)
    conv.convert()
    return conv.b, conv.output_map
