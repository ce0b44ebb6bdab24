"""Command-line entry point.

Subcommands: segment, classify, evaluate, calibrate-sigma, report. All
settings live in a flat key=value config file, overridable by flags
(flags win). Exit codes: 0 success, 1 when per-case failures occurred
(the run still completes), 2 for invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backends import BackendSpecError, make_classifier_backend, make_slice_backend
from .cascade import (
    DEFAULT_THRESHOLDS,
    PHASES,
    CascadeInputError,
    CascadeStageError,
    cascade_classify,
    compose_input,
)
from .dataset import CaseRecord, DatasetError, load_dataset
from .evaluate import (
    BackendSpecs,
    EvalConfigError,
    EvalSettings,
    calibrate_sigma_model,
    report_csv,
    report_json,
    run_evaluation,
    truth_map,
)
from .grid import DegenerateFitError, Grid2D, SigmaModel
from .masks import Structure
from .niftiio import from_array, write_nifti_file
from .pipeline import PipelineError, SegConfig, SliceBackends, run_pipeline
from .viz import save_overlay

log = logging.getLogger("cardioseg")

EXIT_OK = 0
EXIT_CASE_FAILURES = 1
EXIT_CONFIG = 2

_ROLE_KEYS = ("localizer", "segmenter")
_STRUCTURES = ("RV", "MYO", "LV")

DEFAULTS: Dict[str, str] = {
    "localizer": "oracle",
    "segmenter": "oracle",
    "classifier": "oracle",
    "model-input-size": "224",
    "margin": "0.15",
    "threshold": "0.5",
    "aspect": "1.0",
    "postprocess": "true",
    "sigma-model": "",
    "cascade-thresholds": "0.5,0.5,0.5,0.5",
    "repetitions": "10",
    "seed": "0",
    "jobs": "1",
    "split": "auto",
    "scales": "2,3,4",
    "overlays": "false",
    "ablate": "false",
}


class ConfigError(ValueError):
    """Any condition that makes the run configuration unusable."""


@dataclass
class RunConfig:
    data: Path
    out: Optional[Path]
    specs: BackendSpecs
    seg: SegConfig
    thresholds: Tuple[float, float, float, float]
    repetitions: int
    seed: int
    jobs: int
    overlays: bool
    ablate: bool
    scales: Tuple[float, ...]
    records: List[CaseRecord] = field(default_factory=list)


def parse_config_file(path: Path) -> Dict[str, str]:
    """Flat key=value lines; # starts a comment; blank lines ignored."""
    values: Dict[str, str] = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}")


def _parse_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}")


def _parse_float_list(key: str, value: str) -> Tuple[float, ...]:
    try:
        return tuple(float(item) for item in value.split(",") if item.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {value!r}")


def _merge_settings(args: argparse.Namespace) -> Dict[str, str]:
    merged = dict(DEFAULTS)
    if args.config is not None:
        merged.update(parse_config_file(Path(args.config)))
    flag_map = {
        "localizer": args.localizer,
        "segmenter": args.segmenter,
        "classifier": args.classifier,
        "model-input-size": args.model_input_size,
        "margin": args.margin,
        "threshold": args.threshold,
        "aspect": args.aspect,
        "sigma-model": args.sigma_model,
        "cascade-thresholds": args.cascade_thresholds,
        "repetitions": args.repetitions,
        "seed": args.seed,
        "jobs": args.jobs,
        "split": args.split,
        "scales": getattr(args, "scales", None),
        "data": args.data,
        "out": args.out,
    }
    for key, value in flag_map.items():
        if value is not None:
            merged[key] = str(value)
    if getattr(args, "no_postprocess", False):
        merged["postprocess"] = "false"
    if getattr(args, "overlays", False):
        merged["overlays"] = "true"
    if getattr(args, "ablate", False):
        merged["ablate"] = "true"
    return merged


def _check_backend_paths(specs: BackendSpecs) -> None:
    all_specs = (
        list(specs.localizers.values())
        + list(specs.segmenters.values())
        + list(specs.classifiers)
    )
    for spec in all_specs:
        kind, _, arg = spec.partition(":")
        if kind.strip() in ("model", "table"):
            path = Path(arg.strip())
            if not path.is_file():
                raise ConfigError(f"backend {spec!r}: file not found")


def _select_records(records, split, which: str):
    if which == "train":
        chosen = set(split.train)
    elif which == "test":
        chosen = set(split.test)
    elif which == "all":
        return list(records)
    elif which == "auto":
        chosen = set(split.test) if split.test else None
        if chosen is None:
            return list(records)
    else:
        raise ConfigError(f"split: expected auto|train|test|all, got {which!r}")
    return [r for r in records if r.patient_id in chosen]


def build_run_config(args: argparse.Namespace, need_out: bool = True) -> RunConfig:
    merged = _merge_settings(args)

    if "data" not in merged or not merged["data"]:
        raise ConfigError("a dataset root is required (--data or data=...)")
    data = Path(merged["data"])
    if not data.is_dir():
        raise ConfigError(f"dataset root {data} is not a directory")

    out: Optional[Path] = None
    if need_out:
        if "out" not in merged or not merged["out"]:
            raise ConfigError("an output directory is required (--out or out=...)")
        out = Path(merged["out"])

    sigma_model = None
    if merged["sigma-model"]:
        sigma_path = Path(merged["sigma-model"])
        if not sigma_path.is_file():
            raise ConfigError(f"sigma-model file {sigma_path} not found")
        try:
            sigma_model = SigmaModel.from_dict(json.loads(sigma_path.read_text()))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"sigma-model file {sigma_path}: {exc}")

    try:
        seg_kwargs = dict(
            model_input_size=_parse_int("model-input-size", merged["model-input-size"]),
            margin=_parse_float("margin", merged["margin"]),
            threshold=_parse_float("threshold", merged["threshold"]),
            target_aspect=_parse_float("aspect", merged["aspect"]),
            postprocess=_parse_bool("postprocess", merged["postprocess"]),
        )
        if sigma_model is not None:
            seg_kwargs["sigma_model"] = sigma_model
        seg = SegConfig(**seg_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc))

    thresholds = _parse_float_list("cascade-thresholds", merged["cascade-thresholds"])
    if len(thresholds) != 4 or not all(0.0 <= t <= 1.0 for t in thresholds):
        raise ConfigError(
            f"cascade-thresholds: need 4 values in [0,1], got {merged['cascade-thresholds']!r}"
        )

    scales = _parse_float_list("scales", merged["scales"])
    if any(s <= 1.0 for s in scales):
        raise ConfigError(f"scales: every factor must exceed 1, got {scales}")

    localizers = {
        s: merged.get(f"localizer.{s.lower()}", merged["localizer"])
        for s in _STRUCTURES
    }
    segmenters = {
        s: merged.get(f"segmenter.{s.lower()}", merged["segmenter"])
        for s in _STRUCTURES
    }
    classifiers = tuple(
        merged.get(f"classifier.{stage}", merged["classifier"]) for stage in range(1, 5)
    )
    specs = BackendSpecs(localizers, segmenters, classifiers)
    _check_backend_paths(specs)

    try:
        records, split = load_dataset(data)
    except DatasetError as exc:
        raise ConfigError(f"dataset: {exc}")
    selected = _select_records(records, split, merged["split"])
    if not selected:
        raise ConfigError(f"no cases selected from {data} (split={merged['split']})")

    config = RunConfig(
        data=data,
        out=out,
        specs=specs,
        seg=seg,
        thresholds=tuple(thresholds),
        repetitions=_parse_int("repetitions", merged["repetitions"]),
        seed=_parse_int("seed", merged["seed"]),
        jobs=_parse_int("jobs", merged["jobs"]),
        overlays=_parse_bool("overlays", merged["overlays"]),
        ablate=_parse_bool("ablate", merged["ablate"]),
        scales=scales,
        records=selected,
    )
    if config.repetitions < 1:
        raise ConfigError(f"repetitions must be >= 1, got {config.repetitions}")
    if config.jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {config.jobs}")
    if config.out is not None:
        config.out.mkdir(parents=True, exist_ok=True)
    return config


def _build_slice_backends(config: RunConfig) -> SliceBackends:
    try:
        return SliceBackends(
            localizers={
                Structure[name]: make_slice_backend(
                    config.specs.localizers[name], seed=config.seed
                )
                for name in _STRUCTURES
            },
            segmenters={
                Structure[name]: make_slice_backend(
                    config.specs.segmenters[name], seed=config.seed
                )
                for name in _STRUCTURES
            },
        )
    except BackendSpecError as exc:
        raise ConfigError(str(exc))


def _segment_case(record: CaseRecord, backends: SliceBackends, config: RunConfig):
    """All-slice segmentation for one case; returns {phase: [SegResult]}."""
    results = {}
    for phase in PHASES:
        volume = record.volume_for(phase)
        gt = record.gt_for(phase)
        slices = []
        for k in range(volume.data.shape[0]):
            image = Grid2D(volume.data[k])
            truth = gt[k] if gt is not None else None
            slices.append(
                run_pipeline(
                    image, backends, config.seg, ground_truth=truth, slice_index=k
                )
            )
        results[phase] = slices
    return results


def _write_case_outputs(record: CaseRecord, results, config: RunConfig) -> None:
    for phase in PHASES:
        frame = record.ed_frame if phase == "ED" else record.es_frame
        volume = record.volume_for(phase)
        labels = np.stack(
            [r.final.grid.data for r in results[phase]], axis=0
        ).astype(np.uint8)
        out_path = config.out / f"{record.patient_id}_frame{frame:02d}_seg.nii.gz"
        write_nifti_file(from_array(labels, spacing=volume.spacing), out_path)
        if config.overlays:
            for k, result in enumerate(results[phase]):
                png = (
                    config.out
                    / f"{record.patient_id}_frame{frame:02d}_slice{k:02d}.png"
                )
                save_overlay(png, Grid2D(volume.data[k]), result.final)


def cmd_segment(config: RunConfig) -> int:
    backends = _build_slice_backends(config)
    failures = 0

    def work(record: CaseRecord):
        return record, _segment_case(record, backends, config)

    ordered = sorted(config.records, key=lambda r: r.patient_id)
    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            futures = [(r, pool.submit(work, r)) for r in ordered]
            outcomes = []
            for record, future in futures:
                try:
                    outcomes.append(future.result())
                except (PipelineError, ValueError) as exc:
                    log.error("case %s failed: %s", record.patient_id, exc)
                    failures += 1
    else:
        outcomes = []
        for record in ordered:
            try:
                outcomes.append(work(record))
            except (PipelineError, ValueError) as exc:
                log.error("case %s failed: %s", record.patient_id, exc)
                failures += 1

    for record, results in outcomes:
        _write_case_outputs(record, results, config)
        log.info("segmented %s", record.patient_id)
    log.info("segment: %d cases written, %d failed", len(outcomes), failures)
    return EXIT_CASE_FAILURES if failures else EXIT_OK


def cmd_classify(config: RunConfig) -> int:
    backends = _build_slice_backends(config)
    truth = truth_map(config.records)
    try:
        classifiers = [
            make_classifier_backend(spec, stage, truth)
            for stage, spec in enumerate(config.specs.classifiers, start=1)
        ]
    except BackendSpecError as exc:
        raise ConfigError(str(exc))

    failures = 0
    output = {}
    for record in sorted(config.records, key=lambda r: r.patient_id):
        try:
            results = _segment_case(record, backends, config)
            masks = {
                phase: [r.final for r in results[phase]] for phase in PHASES
            }
            composed = compose_input(record, masks)
            outcome = cascade_classify(composed, classifiers, config.thresholds)
        except (PipelineError, CascadeInputError, CascadeStageError, ValueError) as exc:
            log.error("case %s failed: %s", record.patient_id, exc)
            failures += 1
            continue
        output[record.patient_id] = {
            "predicted": outcome.predicted.value,
            "truth": record.group.value,
            "classifiers_invoked": sorted(outcome.classifiers_invoked),
            "trace": [
                {
                    "stage": d.stage,
                    "score": d.score,
                    "threshold": d.threshold,
                    "branch": d.branch,
                }
                for d in outcome.trace
            ],
        }
        log.info(
            "classified %s as %s", record.patient_id, outcome.predicted.value
        )
    out_path = config.out / "classification.json"
    out_path.write_text(json.dumps(output, sort_keys=True, indent=2) + "\n")
    log.info("classify: %d cases written to %s, %d failed", len(output), out_path, failures)
    return EXIT_CASE_FAILURES if failures else EXIT_OK


def cmd_evaluate(config: RunConfig) -> int:
    settings = EvalSettings(
        seg=config.seg,
        thresholds=config.thresholds,
        repetitions=config.repetitions,
        seed=config.seed,
        jobs=config.jobs,
        ablate=config.ablate,
    )
    try:
        report = run_evaluation(config.records, config.specs, settings)
    except (EvalConfigError, BackendSpecError) as exc:
        raise ConfigError(str(exc))
    (config.out / "report.json").write_text(report_json(report))
    (config.out / "report.csv").write_text(report_csv(report))
    overall = report["aggregate"]["overall"]
    log.info("evaluate: overall accuracy %s, report in %s", overall, config.out)
    for entry in report["errors"]:
        log.error("case %s: %s", entry["case"], entry["error"])
    return EXIT_CASE_FAILURES if report["errors"] else EXIT_OK


def cmd_calibrate_sigma(config: RunConfig) -> int:
    with_gt = [
        r for r in config.records if r.gt_for("ED") is not None or r.gt_for("ES") is not None
    ]
    if not with_gt:
        raise ConfigError("calibration needs ground-truth masks")
    try:
        model = calibrate_sigma_model(with_gt, config.scales)
    except DegenerateFitError as exc:
        raise ConfigError(str(exc))
    out_path = config.out / "sigma_model.json"
    out_path.write_text(json.dumps(model.to_dict(), sort_keys=True, indent=2) + "\n")
    log.info(
        "calibrate-sigma: slope %.4f intercept %.4f (%d points) -> %s",
        model.slope, model.intercept, len(model.calibration_points), out_path,
    )
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    in_path = Path(args.input)
    if not in_path.is_file():
        raise ConfigError(f"report file {in_path} not found")
    try:
        report = json.loads(in_path.read_text())
    except ValueError as exc:
        raise ConfigError(f"report file {in_path}: {exc}")
    if not isinstance(report, dict) or "dice" not in report:
        raise ConfigError(f"report file {in_path}: not an evaluation report")
    out_path = Path(args.out) if args.out else in_path.with_suffix(".csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(report_csv(report))

    print(f"report: {in_path}")
    agg = report.get("aggregate", {})
    if agg.get("overall") is not None:
        print(f"overall accuracy: {agg['overall']:.6f}")
        ref = agg.get("reference") or {}
        if ref.get("flagged"):
            print(
                f"note: recomputed overall differs from published "
                f"{ref['published']} by {ref['delta']:+.6f}"
            )
    for phase in sorted(report["dice"]):
        cells = ", ".join(
            f"{s} {report['dice'][phase][s]['mean']:.4f}"
            for s in sorted(report["dice"][phase])
        )
        print(f"dice {phase}: {cells}")
    print(f"csv written to {out_path}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value settings file")
    parser.add_argument("--data", help="dataset root directory")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--localizer", help="localizer backend spec (all structures)")
    parser.add_argument("--segmenter", help="segmenter backend spec (all structures)")
    parser.add_argument("--classifier", help="classifier backend spec (all stages)")
    parser.add_argument("--model-input-size", type=int, dest="model_input_size")
    parser.add_argument("--margin", type=float)
    parser.add_argument("--threshold", type=float)
    parser.add_argument("--aspect", type=float)
    parser.add_argument(
        "--no-postprocess", action="store_true", dest="no_postprocess",
        help="skip smoothed upscaling",
    )
    parser.add_argument("--sigma-model", dest="sigma_model", help="sigma model JSON")
    parser.add_argument("--cascade-thresholds", dest="cascade_thresholds")
    parser.add_argument("--repetitions", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--jobs", type=int)
    parser.add_argument("--split", choices=("auto", "train", "test", "all"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardioseg",
        description="Cardiac MRI segmentation and cascade classification engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    seg = sub.add_parser("segment", help="write per-case segmentation masks")
    _add_common(seg)
    seg.add_argument("--overlays", action="store_true", help="also write PNG overlays")

    cls = sub.add_parser("classify", help="run the cascade over segmented cases")
    _add_common(cls)

    ev = sub.add_parser("evaluate", help="full evaluation report (JSON + CSV)")
    _add_common(ev)
    ev.add_argument("--ablate", action="store_true", help="include the ablation table")

    cal = sub.add_parser("calibrate-sigma", help="fit the smoothing sigma model")
    _add_common(cal)
    cal.add_argument("--scales", help="comma-separated downscale factors")

    rep = sub.add_parser("report", help="summarize an existing JSON report")
    rep.add_argument("--in", dest="input", required=True, help="report.json path")
    rep.add_argument("--out", help="CSV output path")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args)
        config = build_run_config(args)
        if args.command == "segment":
            return cmd_segment(config)
        if args.command == "classify":
            return cmd_classify(config)
        if args.command == "evaluate":
            return cmd_evaluate(config)
        if args.command == "calibrate-sigma":
            return cmd_calibrate_sigma(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
