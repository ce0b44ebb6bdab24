"""Minimal independent encoder for portable network files.

Used by the tests as an oracle for the reader in cardioseg.onnx_rt: this
module writes the protobuf wire format from scratch with its own code, so
agreement between the two is meaningful. Only the constructs the runtime
claims to support are emitted.
"""

from __future__ import annotations

import struct
from typing import Dict, Optional, Sequence, Tuple

import numpy as np


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


_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.int32): 6, np.dtype(np.int64): 7}


def tensor(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array)
    code = _DTYPE_CODES[array.dtype]
    out = bytearray()
    for dim in array.shape:
        out += _varint_field(1, dim)
    out += _varint_field(2, code)
    out += _string_field(8, name)
    out += _len_field(9, array.astype(array.dtype.newbyteorder("<")).tobytes())
    return bytes(out)


def _attribute(name: str, value) -> bytes:
    out = bytearray(_string_field(1, name))
    if isinstance(value, float):
        out += _float_field(2, value)
        out += _varint_field(20, 1)
    elif isinstance(value, bool):
        raise TypeError("ambiguous attribute type")
    elif isinstance(value, int):
        out += _varint_field(3, value)
        out += _varint_field(20, 2)
    elif isinstance(value, str):
        out += _string_field(4, value)
        out += _varint_field(20, 3)
    elif isinstance(value, np.ndarray):
        out += _len_field(5, tensor("", value))
        out += _varint_field(20, 4)
    elif isinstance(value, (tuple, list)) and value and isinstance(value[0], float):
        packed = b"".join(struct.pack("<f", v) for v in value)
        out += _len_field(7, packed)
        out += _varint_field(20, 6)
    elif isinstance(value, (tuple, list)):
        packed = b"".join(_varint(int(v)) for v in value)
        out += _len_field(8, packed)
        out += _varint_field(20, 7)
    else:
        raise TypeError(f"unsupported attribute {name}={value!r}")
    return _len_field(5, bytes(out))


def node(
    op_type: str,
    inputs: Sequence[str],
    outputs: Sequence[str],
    name: str = "",
    **attrs,
) -> bytes:
    out = bytearray()
    for item in inputs:
        out += _string_field(1, item)
    for item in outputs:
        out += _string_field(2, item)
    if name:
        out += _string_field(3, name)
    out += _string_field(4, op_type)
    for key, value in attrs.items():
        out += _attribute(key, value)
    return bytes(out)


def _value_info(name: str, shape: Optional[Sequence[int]] = None) -> bytes:
    out = bytearray(_string_field(1, name))
    if shape is not None:
        dims = b"".join(
            _len_field(1, _varint_field(1, d)) for d in shape
        )
        tensor_type = _varint_field(1, 1) + _len_field(2, dims)
        out += _len_field(2, _len_field(1, tensor_type))
    return bytes(out)


def graph(
    nodes: Sequence[bytes],
    initializers: Dict[str, np.ndarray],
    inputs: Sequence[str],
    outputs: Sequence[str],
    name: str = "g",
) -> bytes:
    out = bytearray()
    for encoded in nodes:
        out += _len_field(1, encoded)
    out += _string_field(2, name)
    for init_name, array in initializers.items():
        out += _len_field(5, tensor(init_name, array))
    for item in inputs:
        out += _len_field(11, _value_info(item))
    for item in outputs:
        out += _len_field(12, _value_info(item))
    return bytes(out)


def model(graph_buf: bytes, opset: int = 13) -> bytes:
    out = bytearray()
    out += _varint_field(1, 8)  # ir_version
    out += _string_field(2, "testbuilder")
    out += _len_field(7, graph_buf)
    out += _len_field(8, _string_field(1, "") + _varint_field(2, opset))
    return bytes(out)


def build(
    nodes: Sequence[bytes],
    initializers: Dict[str, np.ndarray],
    inputs: Sequence[str],
    outputs: Sequence[str],
) -> bytes:
    return model(graph(nodes, initializers, list(initializers) + list(inputs), outputs))
