"""Strict single-file NIfTI-1 reader/writer, optionally gzip-wrapped.

Covers exactly what cardiac cine volumes and their ground-truth label maps
need: datatypes uint8/int16/float32, 2-D to 4-D arrays, slope/intercept
scaling, both byte orders. Two-file (.hdr/.img) layouts and NIfTI-2 are
rejected with explicit errors rather than misparsed.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .grid import Volume3D

HEADER_SIZE = 348
DATA_OFFSET = 352  # header + 4-byte extension flag

MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

DTYPE_BY_CODE = {2: np.uint8, 4: np.int16, 16: np.float32}
BITPIX_BY_CODE = {2: 8, 4: 16, 16: 32}
CODE_BY_DTYPE = {np.dtype(v).str[1:]: k for k, v in DTYPE_BY_CODE.items()}

# full NIfTI-1 header layout, standard sizes, no padding
_HEADER_FMT = (
    "i10s18sih2B8h3f4h8f3fh2B4f2i80s24s2h6f12f16s4s"
)
assert struct.calcsize("<" + _HEADER_FMT) == HEADER_SIZE


class NiftiFormatError(ValueError):
    """A malformed or unsupported file; ``field`` names the offending part."""

    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class NiftiHeader:
    dim: Tuple[int, ...]  # 8 entries, dim[0] is the rank
    datatype_code: int
    bitpix: int
    pixdim: Tuple[float, ...]  # 8 entries
    vox_offset: int = DATA_OFFSET
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    magic: bytes = MAGIC_SINGLE
    descrip: bytes = b""

    @property
    def rank(self) -> int:
        return self.dim[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        """Numpy shape: slowest axis first, x fastest (last)."""
        return tuple(self.dim[self.rank:0:-1])

    @property
    def spacing(self) -> Tuple[float, ...]:
        return tuple(self.pixdim[1 : self.rank + 1])


@dataclass(frozen=True)
class NiftiVolume:
    header: NiftiHeader
    raw: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        expected = self.header.shape
        if self.raw.shape != expected:
            raise NiftiFormatError(
                "dim", f"array shape {self.raw.shape} does not match header {expected}"
            )

    @property
    def voxels(self) -> np.ndarray:
        """Raw values with the header's linear scaling applied (float64)."""
        data = self.raw.astype(np.float64)
        slope, inter = self.header.scl_slope, self.header.scl_inter
        if slope != 0.0 and math.isfinite(slope):
            data = data * slope + (inter if math.isfinite(inter) else 0.0)
        return data

    @property
    def n_frames(self) -> int:
        return self.raw.shape[0] if self.header.rank == 4 else 1

    def frame(self, index: int) -> np.ndarray:
        """Scaled 3-D array for one time frame of a 4-D volume."""
        if self.header.rank != 4:
            raise ValueError("frame extraction requires a 4-D volume")
        return self.voxels[index]

    def to_volume3d(self, frame: Optional[int] = None) -> Volume3D:
        """Scaled voxels as a spatial volume with mm spacing.

        Nonpositive pixdim entries (seen in sloppy exports) fall back to
        1 mm so downstream geometry stays valid.
        """
        if self.header.rank == 4:
            if frame is None:
                raise ValueError("4-D volume: pick a frame")
            data = self.frame(frame)
        else:
            data = self.voxels
            if self.header.rank == 2:
                data = data[np.newaxis, :, :]
        sp = list(self.header.spacing[:3]) + [1.0] * (3 - min(3, self.header.rank))
        spacing = tuple(s if s > 0 else 1.0 for s in sp[:3])
        return Volume3D(data, spacing=spacing)


def from_array(
    data: np.ndarray,
    spacing: Optional[Tuple[float, ...]] = None,
    scl_slope: float = 0.0,
    scl_inter: float = 0.0,
    descrip: bytes = b"",
) -> NiftiVolume:
    """Wrap an array (2-D to 4-D, supported dtype) as a writable volume."""
    arr = np.asarray(data)
    key = np.dtype(arr.dtype).str[1:]
    if key not in CODE_BY_DTYPE:
        raise NiftiFormatError("datatype", f"unsupported array dtype {arr.dtype}")
    if not 2 <= arr.ndim <= 4:
        raise NiftiFormatError("dim", f"rank {arr.ndim} outside supported 2..4")
    code = CODE_BY_DTYPE[key]
    dim = [arr.ndim] + [1] * 7
    for axis, size in enumerate(reversed(arr.shape)):
        dim[axis + 1] = int(size)
    pixdim = [0.0] * 8
    if spacing is None:
        spacing = (1.0,) * arr.ndim
    for axis, s in enumerate(spacing[: arr.ndim]):
        pixdim[axis + 1] = float(s)
    header = NiftiHeader(
        dim=tuple(dim),
        datatype_code=code,
        bitpix=BITPIX_BY_CODE[code],
        pixdim=tuple(pixdim),
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        descrip=descrip[:80],
    )
    return NiftiVolume(header, arr)


def _detect_byteorder(raw: bytes) -> str:
    le = struct.unpack_from("<i", raw)[0]
    be = struct.unpack_from(">i", raw)[0]
    if le == HEADER_SIZE:
        return "<"
    if be == HEADER_SIZE:
        return ">"
    if 540 in (le, be):  # NIfTI-2 header size
        raise NiftiFormatError("sizeof_hdr", "NIfTI-2 is not supported")
    raise NiftiFormatError("sizeof_hdr", f"expected 348, got {le} (LE) / {be} (BE)")


def read_nifti(data: bytes, gz: Optional[bool] = None) -> NiftiVolume:
    """Parse a NIfTI-1 byte stream.

    ``gz`` forces the container interpretation; None sniffs the two-byte
    gzip signature. Every malformation raises NiftiFormatError naming the
    bad field; the parser never reads past the declared data length.
    """
    if gz is None:
        gz = data[:2] == b"\x1f\x8b"
    if gz:
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise NiftiFormatError("gzip", f"bad gzip container: {exc}") from exc
    if len(data) < HEADER_SIZE:
        raise NiftiFormatError("sizeof_hdr", f"stream of {len(data)} bytes is shorter than a header")

    order = _detect_byteorder(data)
    fields = struct.unpack_from(order + _HEADER_FMT, data)
    dim = fields[7:15]
    datatype_code = fields[19]
    bitpix = fields[20]
    pixdim = fields[22:30]
    vox_offset_f = fields[30]
    scl_slope = fields[31]
    scl_inter = fields[32]
    magic = fields[65]

    if magic == MAGIC_PAIR:
        raise NiftiFormatError("magic", "two-file .hdr/.img layout is not supported")
    if magic != MAGIC_SINGLE:
        raise NiftiFormatError("magic", f"bad magic {magic!r}")
    rank = dim[0]
    if not 2 <= rank <= 4:
        raise NiftiFormatError("dim", f"dim[0] = {rank} outside supported 2..4")
    used = dim[1 : rank + 1]
    if any(d < 1 for d in used):
        raise NiftiFormatError("dim", f"nonpositive extent in {tuple(used)}")
    if datatype_code not in DTYPE_BY_CODE:
        raise NiftiFormatError("datatype", f"unsupported datatype code {datatype_code}")
    if bitpix != BITPIX_BY_CODE[datatype_code]:
        raise NiftiFormatError(
            "bitpix", f"bitpix {bitpix} inconsistent with datatype {datatype_code}"
        )
    if not math.isfinite(vox_offset_f) or vox_offset_f < DATA_OFFSET:
        raise NiftiFormatError("vox_offset", f"invalid data offset {vox_offset_f}")
    vox_offset = int(round(vox_offset_f))

    count = 1
    for d in used:
        count *= int(d)
    nbytes = count * (bitpix // 8)
    if len(data) < vox_offset + nbytes:
        raise NiftiFormatError(
            "data", f"declared {nbytes} data bytes at {vox_offset}, stream has {len(data)}"
        )
    dtype = np.dtype(DTYPE_BY_CODE[datatype_code]).newbyteorder(order)
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=vox_offset)
    raw = raw.reshape(tuple(reversed(used))).astype(DTYPE_BY_CODE[datatype_code])

    header = NiftiHeader(
        dim=tuple(int(d) for d in dim),
        datatype_code=int(datatype_code),
        bitpix=int(bitpix),
        pixdim=tuple(float(p) for p in pixdim),
        vox_offset=vox_offset,
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        magic=MAGIC_SINGLE,
        descrip=fields[42].rstrip(b"\x00"),
    )
    return NiftiVolume(header, raw)


def write_nifti(vol: NiftiVolume, gz: bool = False, byteorder: str = "<") -> bytes:
    """Serialize to the single-file layout: 348-byte header, zeroed 4-byte
    extension flag, voxel data at offset 352."""
    if byteorder not in ("<", ">"):
        raise ValueError(f"byteorder must be '<' or '>', got {byteorder!r}")
    h = vol.header
    if h.datatype_code not in DTYPE_BY_CODE:
        raise NiftiFormatError("datatype", f"unsupported datatype code {h.datatype_code}")
    header = struct.pack(
        byteorder + _HEADER_FMT,
        HEADER_SIZE,
        b"", b"", 0, 0, 0, 0,
        *[int(d) for d in h.dim],
        0.0, 0.0, 0.0,
        0,
        int(h.datatype_code),
        int(h.bitpix),
        0,
        *[float(p) for p in h.pixdim],
        float(DATA_OFFSET),
        float(h.scl_slope),
        float(h.scl_inter),
        0, 0, 0,
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        h.descrip[:80],
        b"",
        0, 0,
        *([0.0] * 6),
        *([0.0] * 12),
        b"",
        MAGIC_SINGLE,
    )
    dtype = np.dtype(DTYPE_BY_CODE[h.datatype_code]).newbyteorder(byteorder)
    payload = header + b"\x00" * 4 + np.ascontiguousarray(vol.raw, dtype=dtype).tobytes()
    if gz:
        return gzip.compress(payload, mtime=0)
    return payload


def read_nifti_file(path) -> NiftiVolume:
    with open(path, "rb") as fh:
        return read_nifti(fh.read())


def write_nifti_file(vol: NiftiVolume, path) -> None:
    gz = str(path).endswith(".gz")
    with open(path, "wb") as fh:
        fh.write(write_nifti(vol, gz=gz))
