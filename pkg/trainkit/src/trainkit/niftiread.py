"""Minimal NIfTI-1 reading, just enough to load training volumes.

Single-file .nii / .nii.gz only; returns the array in (slow, ..., fast)
axis order, matching how the analysis engine stacks slices.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}


class NiftiReadError(ValueError):
    pass


def read_volume(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiReadError(f"{path}: bad gzip container: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise NiftiReadError(f"{path}: truncated header")
    if struct.unpack_from("<i", raw)[0] == HEADER_SIZE:
        order = "<"
    elif struct.unpack_from(">i", raw)[0] == HEADER_SIZE:
        order = ">"
    else:
        raise NiftiReadError(f"{path}: not a NIfTI-1 stream")

    dim = struct.unpack_from(order + "8h", raw, 40)
    datatype = struct.unpack_from(order + "h", raw, 70)[0]
    vox_offset = int(struct.unpack_from(order + "f", raw, 108)[0])
    scl_slope = struct.unpack_from(order + "f", raw, 112)[0]
    scl_inter = struct.unpack_from(order + "f", raw, 116)[0]

    rank = dim[0]
    if not 2 <= rank <= 4:
        raise NiftiReadError(f"{path}: rank {rank} outside 2..4")
    shape = tuple(int(d) for d in dim[1 : rank + 1])
    if datatype not in _DTYPES:
        raise NiftiReadError(f"{path}: unsupported datatype {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)
    count = int(np.prod(shape))
    if len(raw) < vox_offset + count * dtype.itemsize:
        raise NiftiReadError(f"{path}: data shorter than declared shape")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    out = data.reshape(tuple(reversed(shape))).astype(np.float64)
    if np.isfinite(scl_slope) and scl_slope not in (0.0, 1.0):
        out = out * scl_slope + (scl_inter if np.isfinite(scl_inter) else 0.0)
    return out
