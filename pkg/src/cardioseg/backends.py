"""Built-in prediction backends.

Slice predictors (localization and delineation) and cascade classifiers
come in pluggable kinds:

* ``oracle``      — reads the ground truth from the prediction context.
* ``noisy:<px>``  — oracle, then erodes or dilates by ``px`` pixels; the
                    direction flips with seed, slice, and structure so
                    errors do not cancel systematically.
* ``constant:<v>``— uniform score or probability map.
* ``table:<path>``— per-case score lookup (classifiers only).
* ``model:<path>``— portable network file run by the bundled adapter.

Oracle and noisy kinds are first-class: published numbers cannot be
reproduced without trained weights, so the quantitative suite runs on
phantoms with these backends instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np
from scipy import ndimage

from .cascade import ClassifierInput, PathologyClass
from .grid import Grid2D, resize
from .masks import Structure, crop
from .pipeline import PredictContext

# classes on the positive side of each cascade stage
STAGE_POSITIVE = {
    1: frozenset({PathologyClass.MINF, PathologyClass.HCM, PathologyClass.DCM}),
    2: frozenset({PathologyClass.ARV}),
    3: frozenset({PathologyClass.HCM}),
    4: frozenset({PathologyClass.MINF}),
}


class BackendSpecError(ValueError):
    """Unparseable or unusable backend specification string."""


def _gt_binary(ctx: PredictContext) -> np.ndarray:
    if ctx.ground_truth is None:
        raise ValueError("oracle backend needs ground truth in the context")
    return (ctx.ground_truth.grid.data == ctx.structure.label).astype(np.float64)


def _view(full: np.ndarray, ctx: PredictContext, out_shape) -> Grid2D:
    grid = Grid2D(full)
    if ctx.region is not None:
        grid = crop(grid, ctx.region)
    h, w = out_shape
    return resize(grid, w, h, mode="bilinear")


@dataclass(frozen=True)
class OracleSlicePredictor:
    """Returns the ground-truth structure mask for the requested view."""

    def predict(self, image: Grid2D, ctx: PredictContext) -> Grid2D:
        return _view(_gt_binary(ctx), ctx, image.data.shape)


@dataclass(frozen=True)
class NoisySlicePredictor:
    """Ground truth perturbed by a morphological erode or dilate.

    The direction is a parity of (seed, slice, structure), emulating a
    model that sometimes over- and sometimes under-segments.
    """

    pixels: int = 1
    seed: int = 0

    def predict(self, image: Grid2D, ctx: PredictContext) -> Grid2D:
        full = _gt_binary(ctx)
        if self.pixels > 0 and full.any():
            dilate = (self.seed + ctx.slice_index + ctx.structure.label) % 2 == 0
            op = ndimage.binary_dilation if dilate else ndimage.binary_erosion
            full = op(full > 0, iterations=self.pixels).astype(np.float64)
        return _view(full, ctx, image.data.shape)


@dataclass(frozen=True)
class ConstantSlicePredictor:
    value: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"constant must be in [0,1], got {self.value}")

    def predict(self, image: Grid2D, ctx: PredictContext) -> Grid2D:
        return Grid2D(np.full(image.data.shape, self.value))


@dataclass(frozen=True)
class ModelSlicePredictor:
    """Runs a portable network file: (1,1,S,S) image in, (1,1,S,S)
    probability map out."""

    path: str

    def predict(self, image: Grid2D, ctx: PredictContext) -> Grid2D:
        from . import onnx_rt

        model = onnx_rt.load_model(self.path)
        batch = image.data[np.newaxis, np.newaxis].astype(np.float32)
        out = model.run(batch)
        if out.shape != batch.shape:
            raise ValueError(f"model returned {out.shape} for input {batch.shape}")
        return Grid2D(np.clip(out[0, 0].astype(np.float64), 0.0, 1.0))


@dataclass(frozen=True)
class OracleClassifier:
    """Scores 1 when the case's true class sits on the stage's positive side."""

    stage: int
    truth: Mapping[str, PathologyClass]

    def score(self, x: ClassifierInput) -> float:
        if x.case_id not in self.truth:
            raise KeyError(f"no ground-truth class for case {x.case_id!r}")
        return 1.0 if self.truth[x.case_id] in STAGE_POSITIVE[self.stage] else 0.0


@dataclass(frozen=True)
class ConstantClassifier:
    value: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"constant must be in [0,1], got {self.value}")

    def score(self, x: ClassifierInput) -> float:
        return self.value


class TableClassifier:
    """Per-case scores from a JSON object {case id: score}."""

    def __init__(self, table: Mapping[str, float]) -> None:
        self.table = dict(table)

    @classmethod
    def from_file(cls, path) -> "TableClassifier":
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise BackendSpecError(f"{path}: expected a JSON object of scores")
        return cls(data)

    def score(self, x: ClassifierInput) -> float:
        if x.case_id not in self.table:
            raise KeyError(f"no score for case {x.case_id!r}")
        return float(self.table[x.case_id])


@dataclass(frozen=True)
class ModelClassifier:
    """Portable network adapter: slices and phases flatten into the batch
    axis, the network emits two-way softmax rows, and the case score is
    the mean positive-column probability."""

    path: str

    def score(self, x: ClassifierInput) -> float:
        from . import onnx_rt

        model = onnx_rt.load_model(self.path)
        s, p, c, h, w = x.tensor.shape
        batch = x.tensor.reshape(s * p, c, h, w).astype(np.float32)
        out = model.run(batch)
        if out.ndim != 2 or out.shape[0] != s * p or out.shape[1] != 2:
            raise ValueError(f"classifier returned {out.shape}, expected ({s * p}, 2)")
        return float(np.clip(out[:, 1].mean(), 0.0, 1.0))


def _split_spec(spec: str):
    kind, _, arg = spec.partition(":")
    return kind.strip(), arg.strip()


def make_slice_backend(spec: str, seed: int = 0):
    """Build a slice predictor from its ``kind[:arg]`` string."""
    kind, arg = _split_spec(spec)
    if kind == "oracle":
        return OracleSlicePredictor()
    if kind == "noisy":
        try:
            pixels = int(arg) if arg else 1
        except ValueError:
            raise BackendSpecError(f"noisy backend needs integer pixels, got {arg!r}")
        return NoisySlicePredictor(pixels=pixels, seed=seed)
    if kind == "constant":
        try:
            value = float(arg) if arg else 0.0
        except ValueError:
            raise BackendSpecError(f"constant backend needs a number, got {arg!r}")
        return ConstantSlicePredictor(value=value)
    if kind == "model":
        if not arg:
            raise BackendSpecError("model backend needs a file path")
        return ModelSlicePredictor(path=arg)
    raise BackendSpecError(f"unknown slice backend kind {kind!r}")


def make_classifier_backend(
    spec: str,
    stage: int,
    truth: Optional[Mapping[str, PathologyClass]] = None,
):
    """Build a cascade-stage classifier from its ``kind[:arg]`` string."""
    kind, arg = _split_spec(spec)
    if kind == "oracle":
        return OracleClassifier(stage=stage, truth=dict(truth or {}))
    if kind == "constant":
        try:
            value = float(arg) if arg else 0.0
        except ValueError:
            raise BackendSpecError(f"constant backend needs a number, got {arg!r}")
        return ConstantClassifier(value=value)
    if kind == "table":
        if not arg:
            raise BackendSpecError("table backend needs a file path")
        return TableClassifier.from_file(arg)
    if kind == "model":
        if not arg:
            raise BackendSpecError("model backend needs a file path")
        return ModelClassifier(path=arg)
    raise BackendSpecError(f"unknown classifier backend kind {kind!r}")
