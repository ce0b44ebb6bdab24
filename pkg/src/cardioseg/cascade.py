"""Diagnosis cascade: classifier input composition and the four-stage
binary decision tree over pluggable classifier backends.

Stage semantics: stage 1 separates the left-ventricle pathology group
(MINF, HCM, DCM) from normal hearts and right-ventricle abnormality;
stage 2 splits ARV from NOR; stage 3 splits HCM from the remaining LV
pathologies; stage 4 splits MINF from DCM. Scores are probabilities of
the positive side; ties at a threshold go positive so the tree is total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Dict, FrozenSet, Mapping, Protocol, Sequence, Tuple

import numpy as np

from .grid import Grid2D, Volume3D, resize
from .masks import LabelMask, Structure

if TYPE_CHECKING:
    from .dataset import CaseRecord

INPUT_SIZE = 128
SLICES_PER_CASE = 3
PHASES = ("ED", "ES")
DEFAULT_THRESHOLDS = (0.5, 0.5, 0.5, 0.5)


class PathologyClass(Enum):
    NOR = "NOR"
    ARV = "ARV"
    HCM = "HCM"
    MINF = "MINF"
    DCM = "DCM"


class CascadeInputError(ValueError):
    """Input composition failed; ``phase`` names the missing piece."""

    def __init__(self, phase: str, message: str) -> None:
        super().__init__(f"{phase}: {message}")
        self.phase = phase


class CascadeStageError(RuntimeError):
    """A classifier backend failed; ``stage`` is the 1-based stage id."""

    def __init__(self, stage: int, cause: Exception) -> None:
        super().__init__(f"classifier {stage} failed: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class ClassifierInput:
    """Stacked (slice, phase, channel, y, x) tensor in [0,1].

    Channels carry intensity masked to one structure each: 0 = RV,
    1 = myocardium, 2 = LV (the red/green/blue panels of the composed
    diagnostic image).
    """

    tensor: np.ndarray
    case_id: str = ""
    slice_indices: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.tensor.ndim != 5:
            raise ValueError(f"expected 5-D tensor, got rank {self.tensor.ndim}")
        if self.tensor.min() < 0.0 or self.tensor.max() > 1.0 + 1e-9:
            raise ValueError("tensor values must lie in [0,1]")


class BinaryClassifier(Protocol):
    """Deterministic scorer for one cascade stage."""

    def score(self, x: ClassifierInput) -> float: ...


@dataclass(frozen=True)
class StageDecision:
    stage: int
    score: float
    threshold: float
    branch: str


@dataclass(frozen=True)
class CascadeResult:
    predicted: PathologyClass
    trace: Tuple[StageDecision, ...]
    classifiers_invoked: FrozenSet[int]


def pick_slice_indices(n_slices: int, count: int = SLICES_PER_CASE) -> Tuple[int, ...]:
    """Evenly spaced slice picks (apical, mid, basal for the default 3).

    Midpoints round half-up so picks are position-monotone, unlike
    banker's rounding.
    """
    if n_slices < 1:
        raise ValueError("need at least one slice")
    positions = np.linspace(0, n_slices - 1, num=count)
    return tuple(int(math.floor(p + 0.5)) for p in positions)


def _normalize_slice(plane: np.ndarray) -> np.ndarray:
    """Per-slice min-max rescale to [0,1]; constant nonzero slices map to 1
    so masking still passes intensity through."""
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        return (plane - lo) / (hi - lo)
    return np.ones_like(plane) if hi != 0.0 else np.zeros_like(plane)


def compose_input(
    case: "CaseRecord",
    masks: Mapping[str, Sequence[LabelMask]],
    size: int = INPUT_SIZE,
    slice_count: int = SLICES_PER_CASE,
) -> ClassifierInput:
    """Build the classifier tensor from both cardiac phases.

    For each picked slice and phase, the scan intensity is min-max
    normalized, multiplied by each structure's mask, and the three masked
    planes are bilinearly interpolated to ``size`` x ``size``.
    """
    volumes: Dict[str, Volume3D] = {"ED": case.ed_volume, "ES": case.es_volume}
    for phase in PHASES:
        if phase not in masks:
            raise CascadeInputError(phase, "no segmentation masks for this phase")
        if volumes[phase] is None:
            raise CascadeInputError(phase, "no image volume for this phase")
        if len(masks[phase]) != volumes[phase].data.shape[0]:
            raise CascadeInputError(
                phase,
                f"{len(masks[phase])} masks for {volumes[phase].data.shape[0]} slices",
            )

    indices = pick_slice_indices(volumes["ED"].data.shape[0], slice_count)
    tensor = np.zeros((len(indices), len(PHASES), 3, size, size), dtype=np.float64)
    for si, slice_index in enumerate(indices):
        for pi, phase in enumerate(PHASES):
            volume = volumes[phase]
            k = min(slice_index, volume.data.shape[0] - 1)
            intensity = _normalize_slice(volume.data[k])
            labels = masks[phase][k].grid.data
            for ci, structure in enumerate((Structure.RV, Structure.MYO, Structure.LV)):
                channel = intensity * (labels == structure.label)
                plane = resize(Grid2D(channel), size, size, mode="bilinear")
                tensor[si, pi, ci] = plane.data
    return ClassifierInput(
        tensor=tensor, case_id=case.patient_id, slice_indices=indices
    )


_STAGE_BRANCHES = {
    1: ("lv-pathology", "nor-arv"),
    2: ("ARV", "NOR"),
    3: ("HCM", "minf-dcm"),
    4: ("MINF", "DCM"),
}


def cascade_classify(
    x: ClassifierInput,
    classifiers: Sequence[BinaryClassifier],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> CascadeResult:
    """Walk the decision tree, invoking only the stages on the taken path."""
    if len(classifiers) != 4:
        raise ValueError(f"need 4 classifiers, got {len(classifiers)}")
    if len(thresholds) != 4 or not all(0.0 <= t <= 1.0 for t in thresholds):
        raise ValueError(f"need 4 thresholds in [0,1], got {thresholds}")

    trace = []
    invoked = set()

    def run_stage(stage: int) -> bool:
        invoked.add(stage)
        try:
            score = float(classifiers[stage - 1].score(x))
        except Exception as exc:
            raise CascadeStageError(stage, exc) from exc
        if not 0.0 <= score <= 1.0:
            raise CascadeStageError(
                stage, ValueError(f"score {score} outside [0,1]")
            )
        positive = score >= thresholds[stage - 1]
        pos_branch, neg_branch = _STAGE_BRANCHES[stage]
        trace.append(
            StageDecision(
                stage=stage,
                score=score,
                threshold=thresholds[stage - 1],
                branch=pos_branch if positive else neg_branch,
            )
        )
        return positive

    if run_stage(1):
        if run_stage(3):
            predicted = PathologyClass.HCM
        elif run_stage(4):
            predicted = PathologyClass.MINF
        else:
            predicted = PathologyClass.DCM
    elif run_stage(2):
        predicted = PathologyClass.ARV
    else:
        predicted = PathologyClass.NOR
    return CascadeResult(
        predicted=predicted,
        trace=tuple(trace),
        classifiers_invoked=frozenset(invoked),
    )
