"""Evaluation protocol: repeated seeded runs reduced into report tables.

One evaluation run processes every case with the configured backends,
collects per-phase per-structure Dice, scores each cascade stage directly
on its ground-truth-routed population (all cases for stage 1, NOR and ARV
for stage 2, the LV pathologies for stage 3, MINF and DCM for stage 4),
and repeats with reseeded backends and shuffled case order. The report
carries mean and stdev over repetitions, plus an optional ablation block
that toggles localization, dedicated delineation, and smoothing.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .cascade import (
    DEFAULT_THRESHOLDS,
    PHASES,
    CascadeInputError,
    ClassifierInput,
    PathologyClass,
    compose_input,
)
from .backends import (
    STAGE_POSITIVE,
    make_classifier_backend,
    make_slice_backend,
)
from .dataset import CaseRecord
from .grid import Grid2D, SigmaModel, fit_sigma_model, resize, smooth_upscale
from .masks import BinaryMask, LabelMask, Region, crop, paste
from .metrics import (
    REFERENCE_OVERALL_ACCURACY,
    ConfusionMatrix,
    RocCurve,
    aggregate_accuracy,
    dice,
    roc_auc,
)
from .pipeline import (
    STRUCTURE_ORDER,
    PipelineError,
    PredictContext,
    SegConfig,
    SliceBackends,
    localize,
    run_pipeline,
    run_single_pass,
)

ABLATION_ROWS = ("original", "L", "D", "L+D", "L+D+PP")

STAGE_POPULATIONS: Dict[int, frozenset] = {
    1: frozenset(PathologyClass),
    2: frozenset({PathologyClass.NOR, PathologyClass.ARV}),
    3: frozenset({PathologyClass.MINF, PathologyClass.HCM, PathologyClass.DCM}),
    4: frozenset({PathologyClass.MINF, PathologyClass.DCM}),
}

# (positive side, negative side) row/column labels per stage
STAGE_LABELS: Dict[int, Tuple[str, str]] = {
    1: ("MINF+HCM+DCM", "NOR+ARV"),
    2: ("ARV", "NOR"),
    3: ("HCM", "MINF+DCM"),
    4: ("MINF", "DCM"),
}

CLASS_ORDER = ("NOR", "ARV", "HCM", "MINF", "DCM")


class EvalConfigError(ValueError):
    """Settings that cannot produce a meaningful evaluation."""


@dataclass(frozen=True)
class BackendSpecs:
    """Backend spec strings per role, as accepted by the factories."""

    localizers: Mapping[str, str]
    segmenters: Mapping[str, str]
    classifiers: Tuple[str, str, str, str]

    @classmethod
    def uniform(
        cls, slices: str = "oracle", classifiers: str = "oracle"
    ) -> "BackendSpecs":
        names = {s.name: slices for s in STRUCTURE_ORDER}
        return cls(dict(names), dict(names), (classifiers,) * 4)

    def per_structure(self, table: Mapping[str, str]) -> Dict:
        return {s: table[s.name] for s in STRUCTURE_ORDER}


@dataclass(frozen=True)
class EvalSettings:
    seg: SegConfig = field(default_factory=SegConfig)
    thresholds: Tuple[float, float, float, float] = DEFAULT_THRESHOLDS
    repetitions: int = 10
    seed: int = 0
    jobs: int = 1
    ablate: bool = False

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise EvalConfigError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.jobs < 1:
            raise EvalConfigError(f"jobs must be >= 1, got {self.jobs}")


@dataclass
class CaseOutcome:
    case_id: str
    dice_samples: Dict[Tuple[str, str], List[float]] = field(default_factory=dict)
    predicted: Dict[str, List[LabelMask]] = field(default_factory=dict)
    error: Optional[str] = None


def build_slice_backends(specs: BackendSpecs, seed: int) -> SliceBackends:
    return SliceBackends(
        localizers={
            s: make_slice_backend(specs.localizers[s.name], seed=seed)
            for s in STRUCTURE_ORDER
        },
        segmenters={
            s: make_slice_backend(specs.segmenters[s.name], seed=seed)
            for s in STRUCTURE_ORDER
        },
    )


def truth_map(records: Sequence[CaseRecord]) -> Dict[str, PathologyClass]:
    return {r.patient_id: r.group for r in records}


def _gt_structure_mask(gt: LabelMask, structure) -> BinaryMask:
    return BinaryMask(
        Grid2D((gt.grid.data == structure.label).astype(np.float64)), structure
    )


def process_case(
    record: CaseRecord, backends: SliceBackends, cfg: SegConfig
) -> CaseOutcome:
    """Segment both phases of one case and score every slice against GT."""
    outcome = CaseOutcome(case_id=record.patient_id)
    for phase in PHASES:
        gt = record.gt_for(phase)
        if gt is None:
            outcome.error = f"{phase}: ground truth missing"
            return outcome
        volume = record.volume_for(phase)
        masks: List[LabelMask] = []
        for k in range(volume.data.shape[0]):
            image = Grid2D(volume.data[k])
            try:
                result = run_pipeline(
                    image, backends, cfg, ground_truth=gt[k], slice_index=k
                )
            except PipelineError as exc:
                outcome.error = f"{phase} slice {k}: {exc}"
                return outcome
            masks.append(result.final)
            for structure, predicted in zip(STRUCTURE_ORDER, result.per_structure):
                key = (phase, structure.name)
                outcome.dice_samples.setdefault(key, []).append(
                    dice(predicted, _gt_structure_mask(gt[k], structure))
                )
        outcome.predicted[phase] = masks
    return outcome


@dataclass
class RepSummary:
    dice_means: Dict[Tuple[str, str], float]
    stage_accuracy: List[Optional[float]]
    confusions: List[Optional[ConfusionMatrix]]
    rocs: List[Optional[RocCurve]]
    errors: List[Tuple[str, str]]


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def _stdev(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def run_repetition(
    records: Sequence[CaseRecord],
    specs: BackendSpecs,
    settings: EvalSettings,
    rep: int,
    classifiers: Sequence,
) -> RepSummary:
    rng = np.random.default_rng((settings.seed, rep))
    order = rng.permutation(len(records))
    shuffled = [records[i] for i in order]
    backends = build_slice_backends(specs, seed=settings.seed + rep)

    if settings.jobs > 1:
        with ThreadPoolExecutor(max_workers=settings.jobs) as pool:
            outcomes = list(
                pool.map(lambda r: process_case(r, backends, settings.seg), shuffled)
            )
    else:
        outcomes = [process_case(r, backends, settings.seg) for r in shuffled]
    by_id = {o.case_id: o for o in outcomes}

    dice_pool: Dict[Tuple[str, str], List[float]] = {}
    errors: List[Tuple[str, str]] = []
    inputs: Dict[str, ClassifierInput] = {}
    for record in sorted(records, key=lambda r: r.patient_id):
        outcome = by_id[record.patient_id]
        if outcome.error is not None:
            errors.append((outcome.case_id, outcome.error))
            continue
        for key, values in outcome.dice_samples.items():
            dice_pool.setdefault(key, []).extend(values)
        try:
            inputs[record.patient_id] = compose_input(record, outcome.predicted)
        except CascadeInputError as exc:
            errors.append((record.patient_id, f"compose: {exc}"))

    stage_accuracy: List[Optional[float]] = []
    confusions: List[Optional[ConfusionMatrix]] = []
    rocs: List[Optional[RocCurve]] = []
    truth = truth_map(records)
    for stage in (1, 2, 3, 4):
        pos_label, neg_label = STAGE_LABELS[stage]
        pairs: List[Tuple[str, str]] = []
        scores: List[Tuple[float, bool]] = []
        for case_id in sorted(inputs):
            group = truth[case_id]
            if group not in STAGE_POPULATIONS[stage]:
                continue
            score = float(classifiers[stage - 1].score(inputs[case_id]))
            truth_flag = group in STAGE_POSITIVE[stage]
            predicted_flag = score >= settings.thresholds[stage - 1]
            pairs.append(
                (
                    pos_label if truth_flag else neg_label,
                    pos_label if predicted_flag else neg_label,
                )
            )
            scores.append((score, truth_flag))
        if not pairs:
            stage_accuracy.append(None)
            confusions.append(None)
            rocs.append(None)
            continue
        cm = ConfusionMatrix.from_pairs((pos_label, neg_label), pairs)
        stage_accuracy.append(float(np.trace(cm.counts)) / cm.total)
        confusions.append(cm)
        try:
            rocs.append(roc_auc(scores))
        except ValueError:
            rocs.append(None)

    return RepSummary(
        dice_means={key: _mean(values) for key, values in dice_pool.items()},
        stage_accuracy=stage_accuracy,
        confusions=confusions,
        rocs=rocs,
        errors=errors,
    )


def _localizer_mask(
    image: Grid2D,
    backends: SliceBackends,
    cfg: SegConfig,
    structure,
    gt: LabelMask,
    k: int,
) -> BinaryMask:
    """Localization-only variant: the detector's own thresholded map over
    its crop stands in for delineation."""
    ctx = PredictContext(
        structure=structure,
        slice_index=k,
        original_size=(image.width, image.height),
        ground_truth=gt,
    )
    region = localize(image, backends.localizers[structure], cfg, ctx)
    canvas = np.zeros((image.height, image.width))
    if region is None:
        return BinaryMask(Grid2D(canvas), structure)
    size = cfg.model_input_size
    view = resize(crop(image, region), size, size, mode="bilinear")
    prob = backends.localizers[structure].predict(
        view, replace(ctx, region=region)
    )
    hit = Grid2D((prob.data >= cfg.threshold).astype(np.float64))
    back = resize(hit, region.width, region.height, mode="nearest")
    out = paste(Grid2D(canvas), back, region)
    return BinaryMask(out, structure)


def _variant_masks(
    image: Grid2D,
    backends: SliceBackends,
    cfg: SegConfig,
    variant: str,
    gt: LabelMask,
    k: int,
) -> Dict:
    """One ablation row's per-structure masks for a single slice.

    All rows share the model input budget; they differ in whether the
    model view is the whole slice or a localized crop, whether the
    dedicated delineation backend runs, and whether upscaling smooths.
    """
    flat = replace(cfg, postprocess=False)
    if variant == "original":
        result = run_single_pass(image, backends.localizers, flat, gt, k)
    elif variant == "L":
        return {
            s: _localizer_mask(image, backends, flat, s, gt, k)
            for s in STRUCTURE_ORDER
        }
    elif variant == "D":
        result = run_single_pass(image, backends.segmenters, flat, gt, k)
    elif variant == "L+D":
        result = run_pipeline(image, backends, flat, gt, k)
    elif variant == "L+D+PP":
        result = run_pipeline(image, backends, replace(cfg, postprocess=True), gt, k)
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return dict(zip(STRUCTURE_ORDER, result.per_structure))


def run_ablation(
    records: Sequence[CaseRecord],
    specs: BackendSpecs,
    settings: EvalSettings,
) -> Dict[str, Dict]:
    """Mean Dice per row/phase/structure, pooled over repetitions."""
    pool: Dict[Tuple[str, str, str], List[float]] = {}
    for rep in range(settings.repetitions):
        backends = build_slice_backends(specs, seed=settings.seed + rep)
        for record in sorted(records, key=lambda r: r.patient_id):
            for phase in PHASES:
                gt = record.gt_for(phase)
                if gt is None:
                    continue
                volume = record.volume_for(phase)
                for k in range(volume.data.shape[0]):
                    image = Grid2D(volume.data[k])
                    for row in ABLATION_ROWS:
                        masks = _variant_masks(
                            image, backends, settings.seg, row, gt[k], k
                        )
                        for structure, mask in masks.items():
                            value = dice(
                                mask, _gt_structure_mask(gt[k], structure)
                            )
                            pool.setdefault(
                                (row, phase, structure.name), []
                            ).append(value)
    block: Dict[str, Dict] = {}
    for row in ABLATION_ROWS:
        per_phase: Dict[str, Dict[str, float]] = {}
        row_values: List[float] = []
        for phase in PHASES:
            per_phase[phase] = {}
            for structure in STRUCTURE_ORDER:
                values = pool.get((row, phase, structure.name), [])
                per_phase[phase][structure.name] = _mean(values)
                row_values.extend(values)
        per_phase["mean"] = _mean(row_values)
        block[row] = per_phase
    return block


def run_evaluation(
    records: Sequence[CaseRecord],
    specs: BackendSpecs,
    settings: EvalSettings,
) -> Dict:
    """Full protocol; returns the report dictionary."""
    if not records:
        raise EvalConfigError("no cases to evaluate")
    classifiers = [
        make_classifier_backend(spec, stage, truth_map(records))
        for stage, spec in enumerate(specs.classifiers, start=1)
    ]
    reps = [
        run_repetition(records, specs, settings, rep, classifiers)
        for rep in range(settings.repetitions)
    ]
    report = _build_report(reps, records, settings)
    if settings.ablate:
        report["ablation"] = run_ablation(records, specs, settings)
    return report


def _build_report(
    reps: Sequence[RepSummary],
    records: Sequence[CaseRecord],
    settings: EvalSettings,
) -> Dict:
    dice_block: Dict[str, Dict[str, Dict[str, float]]] = {}
    for phase in PHASES:
        dice_block[phase] = {}
        for structure in STRUCTURE_ORDER:
            key = (phase, structure.name)
            values = [r.dice_means[key] for r in reps if key in r.dice_means]
            dice_block[phase][structure.name] = {
                "mean": _mean(values),
                "stdev": _stdev(values),
            }

    confusion_block: Dict[str, Optional[Dict]] = {}
    roc_block: Dict[str, Optional[Dict]] = {}
    stage_means: List[Optional[float]] = []
    stage_stdev: List[float] = []
    for idx in range(4):
        name = f"classifier_{idx + 1}"
        matrices = [r.confusions[idx] for r in reps if r.confusions[idx] is not None]
        if matrices:
            counts = np.mean([m.counts for m in matrices], axis=0)
            confusion_block[name] = {
                "labels": list(matrices[0].labels),
                "counts": [[float(v) for v in row] for row in counts],
            }
        else:
            confusion_block[name] = None
        accs = [
            r.stage_accuracy[idx] for r in reps if r.stage_accuracy[idx] is not None
        ]
        stage_means.append(_mean(accs) if accs else None)
        stage_stdev.append(_stdev(accs))
        curves = [r.rocs[idx] for r in reps if r.rocs[idx] is not None]
        if curves:
            roc_block[name] = {
                "points": [[float(x), float(y)] for x, y in curves[0].points],
                "auc": {
                    "mean": _mean([c.auc for c in curves]),
                    "stdev": _stdev([c.auc for c in curves]),
                },
            }
        else:
            roc_block[name] = None

    if all(a is not None for a in stage_means):
        agg = aggregate_accuracy(*stage_means)
        overall_per_rep = [
            aggregate_accuracy(*r.stage_accuracy).overall
            for r in reps
            if all(a is not None for a in r.stage_accuracy)
        ]
        aggregate_block = {
            "per_classifier": [float(a) for a in agg.per_classifier],
            "per_classifier_stdev": stage_stdev,
            "per_class": {name: float(agg.per_class[name]) for name in CLASS_ORDER},
            "overall": float(agg.overall),
            "overall_stdev": _stdev(overall_per_rep),
            "reference": {
                "published": REFERENCE_OVERALL_ACCURACY,
                "delta": float(agg.reference_delta),
                "flagged": bool(abs(agg.reference_delta) > 1e-9),
            },
        }
    else:
        aggregate_block = {
            "per_classifier": stage_means,
            "per_classifier_stdev": stage_stdev,
            "per_class": None,
            "overall": None,
            "overall_stdev": None,
            "reference": None,
        }

    errors = sorted({error for rep in reps for error in rep.errors})
    return {
        "dice": dice_block,
        "confusion": confusion_block,
        "roc": roc_block,
        "aggregate": aggregate_block,
        "errors": [{"case": case, "error": message} for case, message in errors],
        "meta": {
            "cases": sorted(r.patient_id for r in records),
            "repetitions": settings.repetitions,
            "seed": settings.seed,
            "thresholds": list(settings.thresholds),
        },
    }


SIGMA_GRID_MAX = 5.0
SIGMA_GRID_STEP = 0.1


def case_gt_masks(record: CaseRecord) -> List[BinaryMask]:
    """Every per-structure ground-truth mask of a case, both phases."""
    masks: List[BinaryMask] = []
    for phase in PHASES:
        gt = record.gt_for(phase)
        if gt is None:
            continue
        for label_mask in gt:
            for structure in STRUCTURE_ORDER:
                masks.append(_gt_structure_mask(label_mask, structure))
    return masks


def sigma_round_trip_dice(
    masks: Sequence[BinaryMask], scale: float, sigma: float
) -> float:
    """Mean Dice of downscale-then-smoothed-upscale against the originals.

    Downscaling is bilinear (the same resampling the model view sees), so
    the small map is a soft probability image; the upscale re-binarizes.
    """
    if scale <= 1.0:
        raise ValueError(f"scale must exceed 1, got {scale}")
    values = []
    for mask in masks:
        h, w = mask.grid.data.shape
        small_w = max(1, round(w / scale))
        small_h = max(1, round(h / scale))
        small = resize(mask.grid, small_w, small_h, mode="bilinear")
        back = smooth_upscale(small, w, h, sigma)
        values.append(dice(BinaryMask(back, mask.structure), mask))
    return _mean(values)


def calibrate_points(
    records: Sequence[CaseRecord],
    scales: Sequence[float],
    step: float = SIGMA_GRID_STEP,
) -> List[Tuple[float, float]]:
    """Grid-search the best sigma per (case, scale) pair.

    Ties take the smallest sigma. The recorded abscissa is the actual
    resize factor of the round trip, which differs from the nominal scale
    when the downscaled dims round.
    """
    sigmas = np.round(np.arange(0.0, SIGMA_GRID_MAX + step / 2, step), 6)
    points: List[Tuple[float, float]] = []
    for record in sorted(records, key=lambda r: r.patient_id):
        masks = case_gt_masks(record)
        if not masks:
            continue
        for scale in scales:
            if scale <= 1.0:
                raise ValueError(f"scale must exceed 1, got {scale}")
            smalls = []
            actual = 1.0
            for mask in masks:
                h, w = mask.grid.data.shape
                small_w = max(1, round(w / scale))
                small_h = max(1, round(h / scale))
                actual = max(actual, w / small_w, h / small_h)
                smalls.append(resize(mask.grid, small_w, small_h, mode="bilinear"))
            curve = []
            for sigma in sigmas:
                values = [
                    dice(
                        BinaryMask(
                            smooth_upscale(small, *mask.grid.data.shape[::-1], sigma),
                            mask.structure,
                        ),
                        mask,
                    )
                    for small, mask in zip(smalls, masks)
                ]
                curve.append(_mean(values))
            best = float(sigmas[int(np.argmax(curve))])
            points.append((float(actual), best))
    return points


def calibrate_sigma_model(
    records: Sequence[CaseRecord],
    scales: Sequence[float],
    step: float = SIGMA_GRID_STEP,
) -> SigmaModel:
    """Fit the sigma-vs-scale line from grid-searched calibration points."""
    return fit_sigma_model(calibrate_points(records, scales, step))


def report_json(report: Mapping) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_csv(report: Mapping) -> str:
    """Flatten the report tables into one CSV."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["table", "group", "item", "metric", "value"])
    for phase in sorted(report["dice"]):
        for structure in sorted(report["dice"][phase]):
            cell = report["dice"][phase][structure]
            writer.writerow(["dice", phase, structure, "mean", cell["mean"]])
            writer.writerow(["dice", phase, structure, "stdev", cell["stdev"]])
    for name in sorted(report["confusion"]):
        block = report["confusion"][name]
        if block is None:
            continue
        for i, truth_label in enumerate(block["labels"]):
            for j, pred_label in enumerate(block["labels"]):
                writer.writerow(
                    [
                        "confusion",
                        name,
                        f"{truth_label}->{pred_label}",
                        "count",
                        block["counts"][i][j],
                    ]
                )
    for name in sorted(report["roc"]):
        block = report["roc"][name]
        if block is None:
            continue
        writer.writerow(["roc", name, "auc", "mean", block["auc"]["mean"]])
        writer.writerow(["roc", name, "auc", "stdev", block["auc"]["stdev"]])
    agg = report["aggregate"]
    for idx, value in enumerate(agg["per_classifier"], start=1):
        writer.writerow(["aggregate", f"classifier_{idx}", "accuracy", "mean", value])
    if agg["per_class"] is not None:
        for name in CLASS_ORDER:
            writer.writerow(
                ["aggregate", name, "accuracy", "mean", agg["per_class"][name]]
            )
        writer.writerow(["aggregate", "overall", "accuracy", "mean", agg["overall"]])
    if "ablation" in report:
        for row in ABLATION_ROWS:
            block = report["ablation"][row]
            for phase in PHASES:
                for structure in sorted(block[phase]):
                    writer.writerow(
                        ["ablation", row, f"{phase}/{structure}", "mean",
                         block[phase][structure]]
                    )
            writer.writerow(["ablation", row, "all", "mean", block["mean"]])
    return out.getvalue()
