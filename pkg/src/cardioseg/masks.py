"""Label-mask algebra: per-structure decomposition and localization geometry.

A segmentation label map assigns one code per pixel (0 background, 1 right
ventricle, 2 myocardium, 3 left ventricle, the public ACDC convention).
This module splits such maps into binary masks, merges them back, and
derives the rectangular crop regions used by the localization stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .grid import Grid2D

BACKGROUND_LABEL = 0


class Structure(Enum):
    """Cardiac structures in label-code order."""

    RV = 1
    MYO = 2
    LV = 3

    @property
    def label(self) -> int:
        return self.value


class Provenance(Enum):
    """How a region was produced, for traceability in pipeline logs."""

    RAW_BBOX = "raw_bbox"
    FRAMED = "framed"
    ASPECT_ADJUSTED = "aspect_adjusted"


@dataclass(frozen=True)
class Region:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int
    provenance: Provenance = Provenance.RAW_BBOX

    def __post_init__(self) -> None:
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate region: {self}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"negative origin: {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def contains(self, other: "Region") -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and self.x1 >= other.x1
            and self.y1 >= other.y1
        )


@dataclass(frozen=True)
class LabelMask:
    """Integer label map over a grid; every value must be a known code."""

    grid: Grid2D

    def __post_init__(self) -> None:
        values = np.unique(self.grid.data)
        allowed = {float(BACKGROUND_LABEL)} | {float(s.label) for s in Structure}
        bad = set(values.tolist()) - allowed
        if bad:
            raise ValueError(f"unknown label codes: {sorted(bad)}")


@dataclass(frozen=True)
class BinaryMask:
    """0/1 indicator map for a single structure."""

    grid: Grid2D
    structure: Structure

    def __post_init__(self) -> None:
        values = np.unique(self.grid.data)
        if not set(values.tolist()) <= {0.0, 1.0}:
            raise ValueError("binary mask must contain only 0 and 1")

    @property
    def pixel_count(self) -> int:
        return int(np.count_nonzero(self.grid.data))


def decompose(mask: LabelMask) -> Tuple[BinaryMask, BinaryMask, BinaryMask]:
    """Split a label map into (RV, MYO, LV) indicator masks.

    The outputs are pairwise disjoint and, together with the background,
    tile the grid exactly.
    """
    out = []
    for structure in (Structure.RV, Structure.MYO, Structure.LV):
        data = (mask.grid.data == structure.label).astype(np.float64)
        out.append(BinaryMask(Grid2D(data, spacing=mask.grid.spacing), structure))
    return out[0], out[1], out[2]


def recompose(rv: BinaryMask, myo: BinaryMask, lv: BinaryMask) -> LabelMask:
    """Merge per-structure masks into one label map.

    Smoothing can make upscaled masks overlap; overlaps resolve innermost
    first (LV over MYO over RV) so the anatomical nesting survives.
    """
    shapes = {rv.grid.data.shape, myo.grid.data.shape, lv.grid.data.shape}
    if len(shapes) != 1:
        raise ValueError(f"mask dimensions differ: {sorted(shapes)}")
    labels = np.zeros(rv.grid.data.shape, dtype=np.float64)
    labels[rv.grid.data > 0] = Structure.RV.label
    labels[myo.grid.data > 0] = Structure.MYO.label
    labels[lv.grid.data > 0] = Structure.LV.label
    return LabelMask(Grid2D(labels, spacing=rv.grid.spacing))


def bbox(mask: BinaryMask) -> Optional[Region]:
    """Tightest axis-aligned rectangle around the 1-pixels, or None if empty."""
    ys, xs = np.nonzero(mask.grid.data)
    if ys.size == 0:
        return None
    return Region(
        x0=int(xs.min()),
        y0=int(ys.min()),
        x1=int(xs.max()) + 1,
        y1=int(ys.max()) + 1,
        provenance=Provenance.RAW_BBOX,
    )


def frame_region(
    region: Region,
    bounds: Tuple[int, int],
    margin: float = 0.15,
    target_aspect: float = 1.0,
) -> Region:
    """Expand a region by a margin fraction, then pad it to a target aspect.

    Steps: each side grows by margin times its own length, rounded outward
    so the frame is never under-delivered; then the shorter axis grows
    symmetrically until width/height matches ``target_aspect`` within one
    pixel; finally the rectangle is clamped to the image bounds. If
    clamping cuts one axis, the opposite axis shrinks back toward the
    aspect, trading margin for shape but never cutting into the input
    region itself.
    """
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    if target_aspect <= 0:
        raise ValueError(f"target aspect must be positive, got {target_aspect}")
    bw, bh = bounds
    if region.x1 > bw or region.y1 > bh:
        raise ValueError(f"region {region} exceeds bounds {bounds}")

    x0 = math.floor(region.x0 - margin * region.width)
    x1 = math.ceil(region.x1 + margin * region.width)
    y0 = math.floor(region.y0 - margin * region.height)
    y1 = math.ceil(region.y1 + margin * region.height)
    provenance = Provenance.FRAMED

    w, h = x1 - x0, y1 - y0
    desired_w = round(target_aspect * h)
    desired_h = round(w / target_aspect)
    if w < desired_w:
        extra = desired_w - w
        x0 -= extra // 2
        x1 += extra - extra // 2
        provenance = Provenance.ASPECT_ADJUSTED
    elif h < desired_h:
        extra = desired_h - h
        y0 -= extra // 2
        y1 += extra - extra // 2
        provenance = Provenance.ASPECT_ADJUSTED

    cx0, cy0 = max(0, x0), max(0, y0)
    cx1, cy1 = min(bw, x1), min(bh, y1)
    x_cut = (cx1 - cx0) < (x1 - x0)
    y_cut = (cy1 - cy0) < (y1 - y0)
    if x_cut and not y_cut:
        cy0, cy1 = _shrink_axis(cy0, cy1, round((cx1 - cx0) / target_aspect),
                                region.y0, region.y1)
    elif y_cut and not x_cut:
        cx0, cx1 = _shrink_axis(cx0, cx1, round((cy1 - cy0) * target_aspect),
                                region.x0, region.x1)
    return Region(x0=cx0, y0=cy0, x1=cx1, y1=cy1, provenance=provenance)


def _shrink_axis(lo: int, hi: int, desired: int, keep_lo: int, keep_hi: int) -> Tuple[int, int]:
    """Shrink [lo, hi) symmetrically toward length ``desired`` without
    cutting into the protected interval [keep_lo, keep_hi)."""
    excess = (hi - lo) - desired
    if excess <= 0:
        return lo, hi
    new_lo = min(lo + excess // 2, keep_lo)
    new_hi = max(hi - (excess - excess // 2), keep_hi)
    return new_lo, new_hi


def crop(grid: Grid2D, region: Region) -> Grid2D:
    """Extract the subgrid covered by a region."""
    if region.x1 > grid.width or region.y1 > grid.height:
        raise ValueError(f"region {region} exceeds grid {grid.width}x{grid.height}")
    return Grid2D(grid.data[region.y0 : region.y1, region.x0 : region.x1], spacing=grid.spacing)


def paste(canvas: Grid2D, patch: Grid2D, region: Region) -> Grid2D:
    """Return a copy of ``canvas`` with ``patch`` written into ``region``."""
    if (patch.height, patch.width) != (region.height, region.width):
        raise ValueError(
            f"patch {patch.width}x{patch.height} does not fit region "
            f"{region.width}x{region.height}"
        )
    out = canvas.data.copy()
    out[region.y0 : region.y1, region.x0 : region.x1] = patch.data
    return Grid2D(out, spacing=canvas.spacing)
