"""Raster primitives: 2-D/3-D grids, resampling, Gaussian filtering and the
sigma-vs-scale regression used by mask postprocessing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SIGMA_MIN = 0.0
SIGMA_MAX = 10.0


class DegenerateFitError(ValueError):
    """Raised when a regression fit has fewer than two distinct abscissae."""


@dataclass(frozen=True, eq=False)
class Grid2D:
    """A single image plane: float64 pixels plus physical pixel spacing (mm).

    ``data`` is (height, width), row-major. Mask-valued grids keep values in
    [0, 1]; intensity grids are unconstrained.
    """

    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"Grid2D data must be 2-D and non-empty, got shape {arr.shape}")
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ValueError(f"pixel spacing must be positive, got {self.spacing}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A stack of image planes: (slices, height, width) with (dx, dy, dz) mm spacing."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"Volume3D data must be 3-D, got shape {arr.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"voxel spacing must be positive, got {self.spacing}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def slices(self) -> int:
        return self.data.shape[0]

    def plane(self, index: int) -> Grid2D:
        """Extract one slice as a Grid2D, keeping the in-plane spacing."""
        return Grid2D(self.data[index], spacing=(self.spacing[0], self.spacing[1]))


@dataclass(frozen=True)
class GaussianKernel:
    """Separable 1-D form of a truncated, renormalized Gaussian kernel."""

    sigma: float
    radius: int
    weights: np.ndarray


@dataclass(frozen=True)
class SigmaModel:
    """Linear model predicting the smoothing sigma from a resize scale factor.

    Predictions are clamped to [SIGMA_MIN, SIGMA_MAX] so extrapolation can
    never wipe out a mask.
    """

    slope: float
    intercept: float
    calibration_points: tuple[tuple[float, float], ...] = field(default_factory=tuple)

    def predict(self, scale_factor: float) -> float:
        raw = self.slope * scale_factor + self.intercept
        return float(min(max(raw, SIGMA_MIN), SIGMA_MAX))

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "points": [list(p) for p in self.calibration_points],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SigmaModel":
        return cls(
            slope=float(d["slope"]),
            intercept=float(d["intercept"]),
            calibration_points=tuple((float(s), float(v)) for s, v in d.get("points", [])),
        )


#: Fallback sigma model: no smoothing at scale 1, half a pixel per doubling.
DEFAULT_SIGMA_MODEL = SigmaModel(slope=0.5, intercept=-0.5)


def gaussian_eval(x: float, y: float, sigma: float) -> float:
    """Value of the 2-D isotropic Gaussian at (x, y).

    Raises ValueError when sigma is not strictly positive.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    s2 = sigma * sigma
    return math.exp(-(x * x + y * y) / (2.0 * s2)) / (2.0 * math.pi * s2)


def gaussian_kernel(sigma: float) -> GaussianKernel:
    """Discrete separable kernel: truncated at ceil(3*sigma), renormalized to sum 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    w /= w.sum()
    w.setflags(write=False)
    return GaussianKernel(sigma=float(sigma), radius=radius, weights=w)


def _convolve_axis(data: np.ndarray, weights: np.ndarray, radius: int, axis: int) -> np.ndarray:
    # Edge-replicated 1-D convolution along the given axis.
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(data, pad, mode="edge")
    out = np.zeros_like(data)
    n = data.shape[axis]
    for i, w in enumerate(weights):
        if axis == 1:
            out += w * padded[:, i : i + n]
        else:
            out += w * padded[i : i + n, :]
    return out


def gaussian_blur(img: Grid2D, sigma: float) -> Grid2D:
    """Separable Gaussian smoothing (horizontal then vertical pass).

    sigma == 0 is the identity; borders are handled by edge replication so a
    constant image stays constant.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    k = gaussian_kernel(sigma)
    blurred = _convolve_axis(img.data, k.weights, k.radius, axis=1)
    blurred = _convolve_axis(blurred, k.weights, k.radius, axis=0)
    return Grid2D(blurred, spacing=img.spacing)


def resize(img: Grid2D, new_w: int, new_h: int, mode: str = "bilinear") -> Grid2D:
    """Resample to (new_w, new_h) with pixel-center alignment.

    Source coordinates follow src = (dst + 0.5) * scale - 0.5, which makes
    resizing to the same dimensions an exact identity. Bilinear output values
    never leave the [min, max] range of the input.
    """
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target dimensions must be >= 1, got {new_w}x{new_h}")
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"unknown resize mode {mode!r}")
    h, w = img.data.shape
    new_spacing = (img.spacing[0] * w / new_w, img.spacing[1] * h / new_h)
    if (new_w, new_h) == (w, h):
        return Grid2D(img.data, spacing=img.spacing)

    sx = w / new_w
    sy = h / new_h
    src_x = (np.arange(new_w, dtype=np.float64) + 0.5) * sx - 0.5
    src_y = (np.arange(new_h, dtype=np.float64) + 0.5) * sy - 0.5

    if mode == "nearest":
        ix = np.clip(np.floor(src_x + 0.5).astype(np.int64), 0, w - 1)
        iy = np.clip(np.floor(src_y + 0.5).astype(np.int64), 0, h - 1)
        out = img.data[np.ix_(iy, ix)]
        return Grid2D(out, spacing=new_spacing)

    x0 = np.floor(src_x)
    y0 = np.floor(src_y)
    fx = src_x - x0
    fy = src_y - y0
    x0c = np.clip(x0.astype(np.int64), 0, w - 1)
    x1c = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    y0c = np.clip(y0.astype(np.int64), 0, h - 1)
    y1c = np.clip(y0.astype(np.int64) + 1, 0, h - 1)

    d = img.data
    top = (1.0 - fx) * d[np.ix_(y0c, x0c)] + fx * d[np.ix_(y0c, x1c)]
    bottom = (1.0 - fx) * d[np.ix_(y1c, x0c)] + fx * d[np.ix_(y1c, x1c)]
    out = (1.0 - fy)[:, None] * top + fy[:, None] * bottom
    return Grid2D(out, spacing=new_spacing)


def fit_sigma_model(points: list[tuple[float, float]]) -> SigmaModel:
    """Ordinary least squares line through (scale_factor, best_sigma) pairs.

    Raises DegenerateFitError unless at least two distinct scale factors are
    present.
    """
    if len(points) < 2 or len({x for x, _ in points}) < 2:
        raise DegenerateFitError(
            f"need >= 2 points with >= 2 distinct scale factors, got {points!r}"
        )
    xs = np.asarray([p[0] for p in points], dtype=np.float64)
    ys = np.asarray([p[1] for p in points], dtype=np.float64)
    xbar = xs.mean()
    ybar = ys.mean()
    sxx = float(((xs - xbar) ** 2).sum())
    sxy = float(((xs - xbar) * (ys - ybar)).sum())
    slope = sxy / sxx
    intercept = ybar - slope * xbar
    return SigmaModel(
        slope=float(slope),
        intercept=float(intercept),
        calibration_points=tuple((float(x), float(y)) for x, y in points),
    )


def smooth_upscale(
    mask: Grid2D, target_w: int, target_h: int, sigma: float, threshold: float = 0.5
) -> Grid2D:
    """Resize a binary mask with an explicit smoothing sigma.

    Bilinear resize, Gaussian blur, then re-binarize at ``threshold`` (ties go
    to foreground). The result is again {0, 1}-valued.
    """
    resized = resize(mask, target_w, target_h, mode="bilinear")
    blurred = gaussian_blur(resized, sigma)
    binary = (blurred.data >= threshold).astype(np.float64)
    return Grid2D(binary, spacing=blurred.spacing)


def upscale_mask_smoothed(
    mask: Grid2D,
    target_w: int,
    target_h: int,
    model: SigmaModel,
    threshold: float = 0.5,
) -> Grid2D:
    """Smoothed rescaling of a binary mask to the target dimensions.

    The smoothing sigma comes from ``model`` evaluated at the linear scale
    factor max(target_w / w, target_h / h).
    """
    scale = max(target_w / mask.width, target_h / mask.height)
    sigma = model.predict(scale)
    return smooth_upscale(mask, target_w, target_h, sigma, threshold)
