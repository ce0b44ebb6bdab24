"""Overlay rendering for human review.

Draws structure contours over the intensity slice: RV red, myocardium
green, LV blue, matching the channel order of the composed classifier
input. Output is plain 8-bit RGB PNG.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .grid import Grid2D
from .masks import LabelMask, Structure

COLORS: Tuple[Tuple[Structure, Tuple[int, int, int]], ...] = (
    (Structure.RV, (255, 64, 64)),
    (Structure.MYO, (64, 255, 64)),
    (Structure.LV, (64, 96, 255)),
)


def _to_uint8(data: np.ndarray) -> np.ndarray:
    lo = float(data.min())
    hi = float(data.max())
    if hi <= lo:
        return np.zeros(data.shape, dtype=np.uint8)
    return np.round((data - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _contour(binary: np.ndarray) -> np.ndarray:
    if not binary.any():
        return binary
    return binary & ~ndimage.binary_erosion(binary, border_value=0)


def render_overlay(image: Grid2D, mask: LabelMask) -> Image.Image:
    """Intensity slice with one-pixel structure contours painted on top."""
    if image.data.shape != mask.grid.data.shape:
        raise ValueError(
            f"image {image.data.shape} and mask {mask.grid.data.shape} differ"
        )
    gray = _to_uint8(image.data)
    rgb = np.stack([gray, gray, gray], axis=-1)
    labels = mask.grid.data.astype(int)
    for structure, color in COLORS:
        edge = _contour(labels == structure.label)
        rgb[edge] = color
    return Image.fromarray(rgb, mode="RGB")


def save_overlay(path, image: Grid2D, mask: LabelMask) -> None:
    render_overlay(image, mask).save(path, format="PNG")
