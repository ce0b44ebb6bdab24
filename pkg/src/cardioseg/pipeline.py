"""Three-step segmentation: localization, per-structure delineation, and
smoothed upscaling back to the original resolution.

Backends are pluggable per-structure predictors; everything here is
geometry and orchestration. A single-pass mode (no localization) exists
as the ablation baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from .grid import (
    DEFAULT_SIGMA_MODEL,
    Grid2D,
    SigmaModel,
    resize,
    smooth_upscale,
)
from .masks import (
    BinaryMask,
    LabelMask,
    Provenance,
    Region,
    Structure,
    bbox,
    crop,
    frame_region,
    paste,
    recompose,
)

STRUCTURE_ORDER = (Structure.RV, Structure.MYO, Structure.LV)


@dataclass(frozen=True)
class PredictContext:
    """Where a prediction request came from.

    Model-backed predictors ignore this; oracle and noisy test backends
    need it to look up the matching ground truth.
    """

    structure: Structure
    slice_index: int = 0
    original_size: Tuple[int, int] = (0, 0)  # (width, height)
    region: Optional[Region] = None  # None while localizing (whole slice)
    ground_truth: Optional[LabelMask] = None


class SlicePredictor(Protocol):
    """Probability-map predictor for one structure at model resolution."""

    def predict(self, image: Grid2D, ctx: PredictContext) -> Grid2D: ...


@dataclass(frozen=True)
class SegConfig:
    model_input_size: int = 224
    margin: float = 0.15
    threshold: float = 0.5
    target_aspect: float = 1.0
    sigma_model: SigmaModel = field(default_factory=lambda: DEFAULT_SIGMA_MODEL)
    postprocess: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0,1), got {self.threshold}")
        if self.model_input_size < 32:
            raise ValueError(
                f"model_input_size must be >= 32, got {self.model_input_size}"
            )
        if self.margin < 0.0:
            raise ValueError(f"margin must be nonnegative, got {self.margin}")


@dataclass(frozen=True)
class StructureTrace:
    structure: Structure
    region: Optional[Region]
    crop_size: Optional[Tuple[int, int]]
    model_size: int
    sigma: float
    postprocessed: bool


@dataclass(frozen=True)
class SegResult:
    final: LabelMask
    per_structure: Tuple[BinaryMask, BinaryMask, BinaryMask]
    regions: Tuple[Optional[Region], Optional[Region], Optional[Region]]
    trace: Tuple[StructureTrace, ...]


@dataclass(frozen=True)
class SliceBackends:
    localizers: Mapping[Structure, SlicePredictor]
    segmenters: Mapping[Structure, SlicePredictor]

    def __post_init__(self) -> None:
        for table, role in ((self.localizers, "localizer"), (self.segmenters, "segmenter")):
            missing = [s.name for s in STRUCTURE_ORDER if s not in table]
            if missing:
                raise ValueError(f"missing {role} backends for {missing}")


class PipelineError(RuntimeError):
    """A backend failed mid-pipeline; names the step and structure."""

    def __init__(self, step: str, structure: Structure, cause: Exception) -> None:
        super().__init__(f"{step}/{structure.name}: {cause}")
        self.step = step
        self.structure = structure


def _run_predictor(
    predictor: SlicePredictor,
    image: Grid2D,
    ctx: PredictContext,
    step: str,
) -> Grid2D:
    try:
        out = predictor.predict(image, ctx)
    except Exception as exc:
        raise PipelineError(step, ctx.structure, exc) from exc
    if out.data.shape != image.data.shape:
        raise PipelineError(
            step,
            ctx.structure,
            ValueError(f"predictor returned {out.data.shape} for {image.data.shape}"),
        )
    if out.data.min() < 0.0 or out.data.max() > 1.0 + 1e-9:
        raise PipelineError(
            step, ctx.structure, ValueError("probabilities outside [0,1]")
        )
    return out


def localize(
    image: Grid2D,
    localizer: SlicePredictor,
    cfg: SegConfig,
    ctx: PredictContext,
) -> Optional[Region]:
    """Find the structure's framed crop region, or None when absent.

    The slice is resized to model resolution, the localizer's probability
    map is thresholded and boxed, and the box is mapped back to original
    pixels before margin and aspect framing.
    """
    size = cfg.model_input_size
    model_view = resize(image, size, size, mode="bilinear")
    prob = _run_predictor(localizer, model_view, ctx, "localize")
    hits = BinaryMask(
        Grid2D((prob.data >= cfg.threshold).astype(np.float64)), ctx.structure
    )
    box = bbox(hits)
    if box is None:
        return None
    sx = image.width / size
    sy = image.height / size
    mapped = Region(
        x0=max(0, math.floor(box.x0 * sx)),
        y0=max(0, math.floor(box.y0 * sy)),
        x1=min(image.width, math.ceil(box.x1 * sx)),
        y1=min(image.height, math.ceil(box.y1 * sy)),
        provenance=Provenance.RAW_BBOX,
    )
    return frame_region(
        mapped,
        bounds=(image.width, image.height),
        margin=cfg.margin,
        target_aspect=cfg.target_aspect,
    )


def segment_structure(
    image: Grid2D,
    region: Optional[Region],
    segmenter: SlicePredictor,
    cfg: SegConfig,
    ctx: PredictContext,
) -> Tuple[BinaryMask, StructureTrace]:
    """Delineate one structure inside its region at original resolution.

    An empty region skips inference and returns an empty mask. With
    postprocessing on, the model-resolution probability map is upscaled
    through the smoothing path; otherwise it is thresholded and
    nearest-resized (the blocky ablation variant).
    """
    size = cfg.model_input_size
    if region is None:
        empty = BinaryMask(Grid2D(np.zeros((image.height, image.width))), ctx.structure)
        trace = StructureTrace(
            structure=ctx.structure,
            region=None,
            crop_size=None,
            model_size=size,
            sigma=0.0,
            postprocessed=cfg.postprocess,
        )
        return empty, trace

    cropped = crop(image, region)
    model_view = resize(cropped, size, size, mode="bilinear")
    prob = _run_predictor(segmenter, model_view, ctx, "segment")

    if cfg.postprocess:
        scale = max(region.width / size, region.height / size)
        sigma = cfg.sigma_model.predict(scale)
        patch = smooth_upscale(
            prob, region.width, region.height, sigma=sigma, threshold=cfg.threshold
        )
    else:
        sigma = 0.0
        binary = Grid2D((prob.data >= cfg.threshold).astype(np.float64))
        patch = resize(binary, region.width, region.height, mode="nearest")

    canvas = Grid2D(np.zeros((image.height, image.width)))
    full = paste(canvas, patch, region)
    mask = BinaryMask(Grid2D((full.data > 0).astype(np.float64)), ctx.structure)
    trace = StructureTrace(
        structure=ctx.structure,
        region=region,
        crop_size=(region.width, region.height),
        model_size=size,
        sigma=sigma,
        postprocessed=cfg.postprocess,
    )
    return mask, trace


def run_pipeline(
    image: Grid2D,
    backends: SliceBackends,
    cfg: SegConfig,
    ground_truth: Optional[LabelMask] = None,
    slice_index: int = 0,
) -> SegResult:
    """Localize, segment, and recompose all three structures for one slice."""
    masks: Dict[Structure, BinaryMask] = {}
    regions = []
    traces = []
    for structure in STRUCTURE_ORDER:
        ctx = PredictContext(
            structure=structure,
            slice_index=slice_index,
            original_size=(image.width, image.height),
            region=None,
            ground_truth=ground_truth,
        )
        region = localize(image, backends.localizers[structure], cfg, ctx)
        seg_ctx = PredictContext(
            structure=structure,
            slice_index=slice_index,
            original_size=(image.width, image.height),
            region=region,
            ground_truth=ground_truth,
        )
        mask, trace = segment_structure(
            image, region, backends.segmenters[structure], cfg, seg_ctx
        )
        masks[structure] = mask
        regions.append(region)
        traces.append(trace)
    final = recompose(
        masks[Structure.RV], masks[Structure.MYO], masks[Structure.LV]
    )
    return SegResult(
        final=final,
        per_structure=(
            masks[Structure.RV],
            masks[Structure.MYO],
            masks[Structure.LV],
        ),
        regions=tuple(regions),
        trace=tuple(traces),
    )


def run_single_pass(
    image: Grid2D,
    segmenters: Mapping[Structure, SlicePredictor],
    cfg: SegConfig,
    ground_truth: Optional[LabelMask] = None,
    slice_index: int = 0,
) -> SegResult:
    """Ablation baseline: segment the whole slice with no localization."""
    full = Region(x0=0, y0=0, x1=image.width, y1=image.height)
    masks: Dict[Structure, BinaryMask] = {}
    traces = []
    for structure in STRUCTURE_ORDER:
        ctx = PredictContext(
            structure=structure,
            slice_index=slice_index,
            original_size=(image.width, image.height),
            region=full,
            ground_truth=ground_truth,
        )
        mask, trace = segment_structure(image, full, segmenters[structure], cfg, ctx)
        masks[structure] = mask
        traces.append(trace)
    final = recompose(
        masks[Structure.RV], masks[Structure.MYO], masks[Structure.LV]
    )
    return SegResult(
        final=final,
        per_structure=(
            masks[Structure.RV],
            masks[Structure.MYO],
            masks[Structure.LV],
        ),
        regions=(full, full, full),
        trace=tuple(traces),
    )
