"""Hand-rolled ONNX protobuf serialization.

Writes the subset of the format the inference engine reads: a model
wrapping one graph of nodes, float32/int64 initializers carried as
raw little-endian bytes, and scalar/string/tensor-list attributes.
No protobuf library is involved; field numbers follow onnx.proto3.
"""

from __future__ import annotations

import struct
from typing import Dict, List, Sequence, Union

import numpy as np

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.int64): 7, np.dtype(np.int32): 6}

AttrValue = Union[float, int, str, Sequence[int], Sequence[float], np.ndarray]


def _varint(value: int) -> bytes:
    if value < 0:
        value += 1 << 64
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _tag(field: int, wire: int) -> bytes:
    return _varint((field << 3) | wire)


def _len_field(field: int, payload: bytes) -> bytes:
    return _tag(field, 2) + _varint(len(payload)) + payload


def _varint_field(field: int, value: int) -> bytes:
    return _tag(field, 0) + _varint(value)


def _float_field(field: int, value: float) -> bytes:
    return _tag(field, 5) + struct.pack("<f", value)


def _string_field(field: int, value: str) -> bytes:
    return _len_field(field, value.encode("utf-8"))


def tensor_proto(name: str, array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported initializer dtype {arr.dtype}")
    buf = bytearray()
    for dim in arr.shape:
        buf += _varint_field(1, int(dim))
    buf += _varint_field(2, code)
    buf += _len_field(8, name.encode("utf-8"))
    buf += _len_field(9, arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return bytes(buf)


def _attribute(name: str, value: AttrValue) -> bytes:
    buf = bytearray(_string_field(1, name))
    if isinstance(value, np.ndarray):
        buf += _len_field(5, tensor_proto(name, value))
        buf += _varint_field(20, 4)
    elif isinstance(value, bool):
        raise ValueError("boolean attributes are not part of the format")
    elif isinstance(value, float):
        buf += _float_field(2, value)
        buf += _varint_field(20, 1)
    elif isinstance(value, int):
        buf += _varint_field(3, value)
        buf += _varint_field(20, 2)
    elif isinstance(value, str):
        buf += _len_field(4, value.encode("utf-8"))
        buf += _varint_field(20, 3)
    elif isinstance(value, (list, tuple)) and value and isinstance(value[0], float):
        for item in value:
            buf += _float_field(7, float(item))
        buf += _varint_field(20, 6)
    elif isinstance(value, (list, tuple)):
        for item in value:
            buf += _varint_field(8, int(item))
        buf += _varint_field(20, 7)
    else:
        raise ValueError(f"unsupported attribute value {value!r}")
    return _len_field(5, bytes(buf))


def node_proto(
    op_type: str,
    inputs: Sequence[str],
    outputs: Sequence[str],
    name: str = "",
    **attrs: AttrValue,
) -> bytes:
    buf = bytearray()
    for item in inputs:
        buf += _string_field(1, item)
    for item in outputs:
        buf += _string_field(2, item)
    if name:
        buf += _string_field(3, name)
    buf += _string_field(4, op_type)
    for key, value in attrs.items():
        buf += _attribute(key, value)
    return bytes(buf)


def _value_info(name: str) -> bytes:
    # dynamic shape: elem_type float32, no dims
    tensor_type = _varint_field(1, 1)
    type_proto = _len_field(1, tensor_type)
    return _len_field(1, name.encode("utf-8")) + _len_field(2, type_proto)


def graph_proto(
    nodes: Sequence[bytes],
    initializers: Sequence[bytes],
    inputs: Sequence[str],
    outputs: Sequence[str],
    name: str = "net",
) -> bytes:
    buf = bytearray()
    for node in nodes:
        buf += _len_field(1, node)
    buf += _string_field(2, name)
    for init in initializers:
        buf += _len_field(5, init)
    for item in inputs:
        buf += _len_field(11, _value_info(item))
    for item in outputs:
        buf += _len_field(12, _value_info(item))
    return bytes(buf)


def model_proto(graph: bytes, producer: str = "trainkit", opset: int = 13) -> bytes:
    opset_import = _string_field(1, "") + _varint_field(2, opset)
    buf = bytearray()
    buf += _varint_field(1, 8)  # ir_version
    buf += _string_field(2, producer)
    buf += _len_field(7, graph)
    buf += _len_field(8, opset_import)
    return bytes(buf)


class GraphBuilder:
    """Accumulates nodes and weights, hands out unique value names."""

    def __init__(self, input_name: str = "input", graph_name: str = "net") -> None:
        self.input_name = input_name
        self.graph_name = graph_name
        self._nodes: List[bytes] = []
        self._initializers: List[bytes] = []
        self._registered: Dict[str, bool] = {}
        self._counter = 0

    def fresh(self, hint: str) -> str:
        self._counter += 1
        return f"{hint}_{self._counter}"

    def weight(self, hint: str, array: np.ndarray) -> str:
        name = self.fresh(hint)
        self._initializers.append(tensor_proto(name, array))
        return name

    def add_node(
        self,
        op_type: str,
        inputs: Sequence[str],
        hint: str = "",
        **attrs: AttrValue,
    ) -> str:
        out = self.fresh(hint or op_type.lower())
        self._nodes.append(
            node_proto(op_type, inputs, [out], name=f"{op_type}_{self._counter}", **attrs)
        )
        return out

    def conv(
        self,
        x: str,
        weight: np.ndarray,
        bias: np.ndarray,
        stride: int = 1,
        pad: int = 0,
    ) -> str:
        w = self.weight("w", weight.astype(np.float32))
        b = self.weight("b", bias.astype(np.float32))
        return self.add_node(
            "Conv",
            [x, w, b],
            hint="conv",
            strides=[stride, stride],
            pads=[pad, pad, pad, pad],
            kernel_shape=[int(weight.shape[2]), int(weight.shape[3])],
            group=1,
        )

    def relu(self, x: str) -> str:
        return self.add_node("Relu", [x])

    def sigmoid(self, x: str) -> str:
        return self.add_node("Sigmoid", [x])

    def softmax(self, x: str) -> str:
        return self.add_node("Softmax", [x], axis=1)

    def add(self, a: str, b: str) -> str:
        return self.add_node("Add", [a, b])

    def concat(self, inputs: Sequence[str]) -> str:
        return self.add_node("Concat", list(inputs), axis=1)

    def maxpool(self, x: str, kernel: int, stride: int, pad: int) -> str:
        return self.add_node(
            "MaxPool",
            [x],
            hint="pool",
            kernel_shape=[kernel, kernel],
            strides=[stride, stride],
            pads=[pad, pad, pad, pad],
        )

    def upscale2x(self, x: str) -> str:
        scales = self.weight("scales", np.array([1.0, 1.0, 2.0, 2.0], dtype=np.float32))
        return self.add_node(
            "Resize",
            [x, "", scales],
            hint="up",
            mode="nearest",
            coordinate_transformation_mode="asymmetric",
            nearest_mode="floor",
        )

    def global_average_pool(self, x: str) -> str:
        return self.add_node("GlobalAveragePool", [x], hint="gap")

    def flatten(self, x: str) -> str:
        return self.add_node("Flatten", [x], axis=1)

    def gemm(self, x: str, weight: np.ndarray, bias: np.ndarray) -> str:
        w = self.weight("fc_w", weight.astype(np.float32))
        b = self.weight("fc_b", bias.astype(np.float32))
        return self.add_node("Gemm", [x, w, b], hint="fc", transB=1)

    def build(self, output: str) -> bytes:
        graph = graph_proto(
            self._nodes,
            self._initializers,
            [self.input_name],
            [output],
            name=self.graph_name,
        )
        return model_proto(graph)
