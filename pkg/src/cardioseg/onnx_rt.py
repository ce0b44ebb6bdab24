"""Self-contained runner for portable network files (ONNX format subset).

The deployment environment cannot assume a vendor runtime, so this module
decodes the protobuf wire format directly and executes the graph with
numpy. Coverage is exactly the operator set the exported segmentation and
classification networks use: Conv, Relu, MaxPool, Add, Concat, Resize
(nearest/asymmetric/floor), GlobalAveragePool, Flatten, Gemm, Sigmoid,
Softmax. Anything else fails loudly with the operator named.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class OnnxError(ValueError):
    """Malformed file or unsupported construct."""


# protobuf wire types
_VARINT = 0
_I64 = 1
_LEN = 2
_I32 = 5


def _read_varint(buf: bytes, pos: int) -> Tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise OnnxError("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise OnnxError("varint overflow")


def _fields(buf: bytes):
    """Yield (field number, wire type, value) triples of one message."""
    pos = 0
    while pos < len(buf):
        key, pos = _read_varint(buf, pos)
        number, wire = key >> 3, key & 0x07
        if wire == _VARINT:
            value, pos = _read_varint(buf, pos)
        elif wire == _LEN:
            length, pos = _read_varint(buf, pos)
            if pos + length > len(buf):
                raise OnnxError(f"field {number}: truncated payload")
            value = buf[pos : pos + length]
            pos += length
        elif wire == _I32:
            if pos + 4 > len(buf):
                raise OnnxError(f"field {number}: truncated fixed32")
            value = buf[pos : pos + 4]
            pos += 4
        elif wire == _I64:
            if pos + 8 > len(buf):
                raise OnnxError(f"field {number}: truncated fixed64")
            value = buf[pos : pos + 8]
            pos += 8
        else:
            raise OnnxError(f"unsupported wire type {wire}")
        yield number, wire, value


def _zigzag_to_int(value: int) -> int:
    # int64 fields are plain two's complement varints in this format
    if value >= 1 << 63:
        value -= 1 << 64
    return value


_TENSOR_DTYPES = {1: np.float32, 6: np.int32, 7: np.int64}


def _parse_tensor(buf: bytes) -> Tuple[str, np.ndarray]:
    dims: List[int] = []
    dtype_code = 1
    name = ""
    raw: Optional[bytes] = None
    float_data: List[float] = []
    int64_data: List[int] = []
    for number, wire, value in _fields(buf):
        if number == 1:
            dims.append(_zigzag_to_int(value))
        elif number == 2:
            dtype_code = value
        elif number == 4:
            if wire == _LEN:  # packed floats
                float_data.extend(np.frombuffer(value, dtype="<f4").tolist())
            else:
                float_data.append(np.frombuffer(value, dtype="<f4")[0])
        elif number == 7:
            if wire == _LEN:
                pos = 0
                while pos < len(value):
                    item, pos = _read_varint(value, pos)
                    int64_data.append(_zigzag_to_int(item))
            else:
                int64_data.append(_zigzag_to_int(value))
        elif number == 8:
            name = value.decode("utf-8")
        elif number == 9:
            raw = value
    if dtype_code not in _TENSOR_DTYPES:
        raise OnnxError(f"tensor {name!r}: unsupported element type {dtype_code}")
    dtype = _TENSOR_DTYPES[dtype_code]
    if raw is not None:
        array = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)
    elif float_data:
        array = np.asarray(float_data, dtype=dtype)
    elif int64_data:
        array = np.asarray(int64_data, dtype=dtype)
    else:
        array = np.zeros(0, dtype=dtype)
    shape = tuple(dims) if dims else array.shape
    expected = int(np.prod(shape)) if shape else array.size
    if array.size != expected:
        raise OnnxError(f"tensor {name!r}: {array.size} values for shape {shape}")
    return name, array.reshape(shape)


@dataclass(frozen=True)
class Attribute:
    name: str
    value: object


def _parse_attribute(buf: bytes) -> Attribute:
    name = ""
    f_val = i_val = s_val = t_val = None
    floats: List[float] = []
    ints: List[int] = []
    for number, wire, value in _fields(buf):
        if number == 1:
            name = value.decode("utf-8")
        elif number == 2:
            f_val = float(np.frombuffer(value, dtype="<f4")[0])
        elif number == 3:
            i_val = _zigzag_to_int(value)
        elif number == 4:
            s_val = value.decode("utf-8")
        elif number == 5:
            t_val = _parse_tensor(value)[1]
        elif number == 7:
            if wire == _LEN:
                floats.extend(np.frombuffer(value, dtype="<f4").tolist())
            else:
                floats.append(float(np.frombuffer(value, dtype="<f4")[0]))
        elif number == 8:
            if wire == _LEN:
                pos = 0
                while pos < len(value):
                    item, pos = _read_varint(value, pos)
                    ints.append(_zigzag_to_int(item))
            else:
                ints.append(_zigzag_to_int(value))
    for candidate in (f_val, i_val, s_val, t_val):
        if candidate is not None:
            return Attribute(name, candidate)
    if floats:
        return Attribute(name, tuple(floats))
    return Attribute(name, tuple(ints))


@dataclass(frozen=True)
class Node:
    op_type: str
    name: str
    inputs: Tuple[str, ...]
    outputs: Tuple[str, ...]
    attrs: Dict[str, object]

    def attr(self, name: str, default=None):
        return self.attrs.get(name, default)


def _parse_node(buf: bytes) -> Node:
    inputs: List[str] = []
    outputs: List[str] = []
    name = ""
    op_type = ""
    attrs: Dict[str, object] = {}
    for number, _, value in _fields(buf):
        if number == 1:
            inputs.append(value.decode("utf-8"))
        elif number == 2:
            outputs.append(value.decode("utf-8"))
        elif number == 3:
            name = value.decode("utf-8")
        elif number == 4:
            op_type = value.decode("utf-8")
        elif number == 5:
            attribute = _parse_attribute(value)
            attrs[attribute.name] = attribute.value
    return Node(op_type, name, tuple(inputs), tuple(outputs), attrs)


def _parse_value_info_name(buf: bytes) -> str:
    for number, _, value in _fields(buf):
        if number == 1:
            return value.decode("utf-8")
    return ""


@dataclass
class Model:
    nodes: Tuple[Node, ...]
    initializers: Dict[str, np.ndarray]
    graph_inputs: Tuple[str, ...]
    graph_outputs: Tuple[str, ...]
    name: str = ""

    def run(self, *feeds: np.ndarray) -> np.ndarray:
        """Execute the graph; returns the (single) graph output."""
        real_inputs = [n for n in self.graph_inputs if n not in self.initializers]
        if len(feeds) != len(real_inputs):
            raise OnnxError(
                f"model expects {len(real_inputs)} inputs, got {len(feeds)}"
            )
        values: Dict[str, np.ndarray] = dict(self.initializers)
        for name, feed in zip(real_inputs, feeds):
            values[name] = np.asarray(feed, dtype=np.float32)
        for node in self.nodes:
            _execute(node, values)
        if len(self.graph_outputs) != 1:
            raise OnnxError(f"expected a single graph output, got {self.graph_outputs}")
        return values[self.graph_outputs[0]]


def parse_model(data: bytes) -> Model:
    graph_buf = None
    for number, _, value in _fields(data):
        if number == 7:
            graph_buf = value
    if graph_buf is None:
        raise OnnxError("no graph in model file")
    nodes: List[Node] = []
    initializers: Dict[str, np.ndarray] = {}
    inputs: List[str] = []
    outputs: List[str] = []
    graph_name = ""
    for number, _, value in _fields(graph_buf):
        if number == 1:
            nodes.append(_parse_node(value))
        elif number == 2:
            graph_name = value.decode("utf-8")
        elif number == 5:
            name, tensor = _parse_tensor(value)
            initializers[name] = tensor
        elif number == 11:
            inputs.append(_parse_value_info_name(value))
        elif number == 12:
            outputs.append(_parse_value_info_name(value))
    return Model(
        nodes=tuple(nodes),
        initializers=initializers,
        graph_inputs=tuple(inputs),
        graph_outputs=tuple(outputs),
        name=graph_name,
    )


_CACHE: Dict[Tuple[str, float, int], Model] = {}


def load_model(path) -> Model:
    """Parse a model file, caching by path and modification stamp."""
    path = os.fspath(path)
    stat = os.stat(path)
    key = (os.path.abspath(path), stat.st_mtime, stat.st_size)
    if key not in _CACHE:
        with open(path, "rb") as fh:
            _CACHE[key] = parse_model(fh.read())
    return _CACHE[key]


def _pair(value, default) -> Tuple[int, int]:
    if value is None:
        return default
    return int(value[0]), int(value[1])


def _conv(node: Node, x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]) -> np.ndarray:
    group = int(node.attr("group", 1))
    if group != 1:
        raise OnnxError(f"{node.name}: grouped convolution not supported")
    sy, sx = _pair(node.attr("strides"), (1, 1))
    pads = node.attr("pads", (0, 0, 0, 0))
    pt, pl, pb, pr = (int(p) for p in pads)
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    oh = (xp.shape[2] - kh) // sy + 1
    ow = (xp.shape[3] - kw) // sx + 1
    out = np.zeros((x.shape[0], w.shape[0], oh, ow), dtype=np.float32)
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, :, ky : ky + sy * oh : sy, kx : kx + sx * ow : sx]
            out += np.einsum(
                "nchw,mc->nmhw", patch, w[:, :, ky, kx], optimize=True
            ).astype(np.float32)
    if b is not None:
        out += b[None, :, None, None]
    return out


def _maxpool(node: Node, x: np.ndarray) -> np.ndarray:
    kh, kw = _pair(node.attr("kernel_shape"), (2, 2))
    sy, sx = _pair(node.attr("strides"), (kh, kw))
    pads = node.attr("pads", (0, 0, 0, 0))
    pt, pl, pb, pr = (int(p) for p in pads)
    xp = np.pad(
        x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf
    )
    oh = (xp.shape[2] - kh) // sy + 1
    ow = (xp.shape[3] - kw) // sx + 1
    out = np.full((x.shape[0], x.shape[1], oh, ow), -np.inf, dtype=np.float32)
    for ky in range(kh):
        for kx in range(kw):
            np.maximum(
                out, xp[:, :, ky : ky + sy * oh : sy, kx : kx + sx * ow : sx], out=out
            )
    return out


def _resize_nearest(node: Node, x: np.ndarray, scales: np.ndarray) -> np.ndarray:
    mode = node.attr("mode", "nearest")
    coord = node.attr("coordinate_transformation_mode", "asymmetric")
    nearest = node.attr("nearest_mode", "floor")
    if mode != "nearest" or coord != "asymmetric" or nearest != "floor":
        raise OnnxError(
            f"{node.name}: only nearest/asymmetric/floor resize supported"
        )
    if scales.shape[0] != 4 or scales[0] != 1 or scales[1] != 1:
        raise OnnxError(f"{node.name}: expected NCHW scales, got {scales}")
    sy, sx = float(scales[2]), float(scales[3])
    oh = int(np.floor(x.shape[2] * sy))
    ow = int(np.floor(x.shape[3] * sx))
    iy = np.clip(np.floor(np.arange(oh) / sy).astype(int), 0, x.shape[2] - 1)
    ix = np.clip(np.floor(np.arange(ow) / sx).astype(int), 0, x.shape[3] - 1)
    return x[:, :, iy[:, None], ix[None, :]]


def _gemm(node: Node, a: np.ndarray, b: np.ndarray, c: Optional[np.ndarray]) -> np.ndarray:
    alpha = float(node.attr("alpha", 1.0))
    beta = float(node.attr("beta", 1.0))
    if int(node.attr("transA", 0)):
        a = a.T
    if int(node.attr("transB", 0)):
        b = b.T
    out = alpha * (a @ b)
    if c is not None:
        out = out + beta * c
    return out.astype(np.float32)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return (exp / exp.sum(axis=axis, keepdims=True)).astype(np.float32)


def _execute(node: Node, values: Dict[str, np.ndarray]) -> None:
    def inp(index: int) -> np.ndarray:
        name = node.inputs[index]
        if name == "":
            raise OnnxError(f"{node.name}: empty input slot {index}")
        if name not in values:
            raise OnnxError(f"{node.name}: unresolved input {name!r}")
        return values[name]

    op = node.op_type
    if op == "Conv":
        bias = inp(2) if len(node.inputs) > 2 else None
        out = _conv(node, inp(0), inp(1), bias)
    elif op == "Relu":
        out = np.maximum(inp(0), 0.0)
    elif op == "MaxPool":
        out = _maxpool(node, inp(0))
    elif op == "Add":
        out = inp(0) + inp(1)
    elif op == "Concat":
        axis = int(node.attr("axis", 1))
        out = np.concatenate([values[name] for name in node.inputs], axis=axis)
    elif op == "Resize":
        scales_name = node.inputs[2] if len(node.inputs) > 2 else ""
        if not scales_name:
            raise OnnxError(f"{node.name}: resize without scales")
        out = _resize_nearest(node, inp(0), values[scales_name])
    elif op == "GlobalAveragePool":
        out = inp(0).mean(axis=(2, 3), keepdims=True).astype(np.float32)
    elif op == "Flatten":
        x = inp(0)
        axis = int(node.attr("axis", 1))
        lead = int(np.prod(x.shape[:axis])) if axis else 1
        out = x.reshape(lead, -1)
    elif op == "Gemm":
        c = inp(2) if len(node.inputs) > 2 else None
        out = _gemm(node, inp(0), inp(1), c)
    elif op == "Sigmoid":
        out = (1.0 / (1.0 + np.exp(-inp(0)))).astype(np.float32)
    elif op == "Softmax":
        out = _softmax(inp(0), int(node.attr("axis", -1)))
    else:
        raise OnnxError(f"unsupported operator {op!r} (node {node.name!r})")
    values[node.outputs[0]] = out.astype(np.float32)
