"""Dataset loading and sample extraction.

Reads the standard cardiac challenge layout: patient directories with an
Info.cfg (ED/ES frame indices, disease group) and per-frame NIfTI
volumes, ground truth suffixed _gt. Labels: 1 = right ventricle,
2 = myocardium, 3 = left ventricle.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .niftiread import NiftiReadError, read_volume

STRUCTURE_LABELS = {"RV": 1, "MYO": 2, "LV": 3}
CHANNEL_ORDER = ("RV", "MYO", "LV")
PHASES = ("ED", "ES")
#: Info.cfg group tokens (the abnormal-RV class is spelled "RV" on disk).
GROUP_TOKENS = ("NOR", "RV", "HCM", "MINF", "DCM")
STAGE_POSITIVE = {
    1: {"MINF", "HCM", "DCM"},
    2: {"RV"},
    3: {"HCM"},
    4: {"MINF"},
}
STAGE_NEGATIVE = {
    1: {"NOR", "RV"},
    2: {"NOR"},
    3: {"MINF", "DCM"},
    4: {"DCM"},
}
SLICES_PER_CASE = 3


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Case:
    patient_id: str
    group: str
    volumes: Dict[str, np.ndarray]          # phase -> (slices, h, w) float
    gt: Dict[str, Optional[np.ndarray]]     # phase -> (slices, h, w) int or None


def _parse_info(path: Path) -> Dict[str, str]:
    meta: Dict[str, str] = {}
    for line in path.read_text().splitlines():
        if ":" in line:
            key, _, value = line.partition(":")
            meta[key.strip()] = value.strip()
    return meta


def _load_case(directory: Path) -> Case:
    pid = directory.name
    info = directory / "Info.cfg"
    if not info.is_file():
        raise DataError(f"{pid}: missing Info.cfg")
    meta = _parse_info(info)
    for key in ("ED", "ES", "Group"):
        if key not in meta:
            raise DataError(f"{pid}: Info.cfg missing {key}")
    group = meta["Group"]
    if group not in GROUP_TOKENS:
        raise DataError(f"{pid}: unknown group {group!r}")
    volumes: Dict[str, np.ndarray] = {}
    gt: Dict[str, Optional[np.ndarray]] = {}
    for phase in PHASES:
        frame = int(meta[phase])
        stem = directory / f"{pid}_frame{frame:02d}"
        img_path = next(
            (p for p in (Path(str(stem) + ".nii.gz"), Path(str(stem) + ".nii")) if p.is_file()),
            None,
        )
        if img_path is None:
            raise DataError(f"{pid}: no volume for frame {frame}")
        try:
            volumes[phase] = read_volume(img_path)
        except NiftiReadError as exc:
            raise DataError(str(exc))
        gt_path = next(
            (p for p in (Path(str(stem) + "_gt.nii.gz"), Path(str(stem) + "_gt.nii")) if p.is_file()),
            None,
        )
        gt[phase] = read_volume(gt_path).astype(np.int64) if gt_path else None
    return Case(patient_id=pid, group=group, volumes=volumes, gt=gt)


def load_cases(root) -> List[Case]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    bases = [b for b in (root / "training", root / "testing") if b.is_dir()] or [root]
    dirs: List[Path] = []
    for base in bases:
        dirs += sorted(
            d for d in base.iterdir() if d.is_dir() and d.name.startswith("patient")
        )
    if not dirs:
        raise DataError(f"no patient directories under {root}")
    return [_load_case(d) for d in dirs]


def normalize_slice(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    if hi <= lo:
        return np.zeros_like(plane, dtype=np.float64)
    return (plane - lo) / (hi - lo)


def _resize(plane: np.ndarray, size: int, mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(plane, dtype=np.float32))
    t = t[None, None]
    if mode == "bilinear":
        out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    else:
        out = F.interpolate(t, size=(size, size), mode="nearest")
    return out[0, 0].numpy()


def _crop_around(mask: np.ndarray, margin: float) -> Tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    my = int(round((y1 - y0) * margin))
    mx = int(round((x1 - x0) * margin))
    return (
        max(0, y0 - my),
        min(mask.shape[0], y1 + my),
        max(0, x0 - mx),
        min(mask.shape[1], x1 + mx),
    )


def segmentation_samples(
    cases: Sequence[Case],
    structure: str,
    crop_to_structure: bool,
    size: int,
    margin: float = 0.15,
) -> Tuple[np.ndarray, np.ndarray]:
    """(N,1,S,S) intensities and (N,1,S,S) binary targets.

    Localizer training sees whole slices; segmenter training sees crops
    around the structure (with a margin), mirroring how the engine feeds
    each role at inference. Slices without the structure are kept for the
    whole-slice role and skipped for the cropped one.
    """
    label = STRUCTURE_LABELS[structure]
    xs: List[np.ndarray] = []
    ys: List[np.ndarray] = []
    for case in cases:
        for phase in PHASES:
            truth = case.gt[phase]
            if truth is None:
                continue
            volume = case.volumes[phase]
            for k in range(volume.shape[0]):
                target = (truth[k] == label).astype(np.float64)
                image = normalize_slice(volume[k])
                if crop_to_structure:
                    if not target.any():
                        continue
                    y0, y1, x0, x1 = _crop_around(target, margin)
                    image = image[y0:y1, x0:x1]
                    target = target[y0:y1, x0:x1]
                xs.append(_resize(image, size, "bilinear"))
                ys.append(_resize(target, size, "nearest"))
    if not xs:
        raise DataError("dataset has no usable ground-truth slices")
    x = np.stack(xs)[:, None].astype(np.float32)
    y = np.stack(ys)[:, None].astype(np.float32)
    return x, y


def pick_slice_indices(n_slices: int, count: int = SLICES_PER_CASE) -> Tuple[int, ...]:
    # round half-up keeps picks position-monotone
    positions = np.linspace(0, n_slices - 1, num=count)
    return tuple(int(np.floor(p + 0.5)) for p in positions)


def case_tensor(case: Case, size: int) -> np.ndarray:
    """(slices*phases, 3, S, S) structure-masked intensity rows."""
    for phase in PHASES:
        if case.gt[phase] is None:
            raise DataError(f"{case.patient_id}: {phase} ground truth missing")
    indices = pick_slice_indices(case.volumes["ED"].shape[0])
    rows: List[np.ndarray] = []
    for k in indices:
        for phase in PHASES:
            volume = case.volumes[phase]
            truth = case.gt[phase]
            kk = min(k, volume.shape[0] - 1)
            image = normalize_slice(volume[kk])
            channels = [
                _resize(image * (truth[kk] == STRUCTURE_LABELS[name]), size, "bilinear")
                for name in CHANNEL_ORDER
            ]
            rows.append(np.stack(channels))
    return np.clip(np.stack(rows), 0.0, 1.0).astype(np.float32)


def stage_rows(
    cases: Sequence[Case], stage: int, size: int
) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Training rows for one cascade stage: X (N,3,S,S), y (N,), case id per row."""
    if stage not in STAGE_POSITIVE:
        raise DataError(f"stage must be 1..4, got {stage}")
    pos, neg = STAGE_POSITIVE[stage], STAGE_NEGATIVE[stage]
    xs: List[np.ndarray] = []
    ys: List[int] = []
    ids: List[str] = []
    seen = {"pos": False, "neg": False}
    for case in cases:
        if case.group in pos:
            label = 1
            seen["pos"] = True
        elif case.group in neg:
            label = 0
            seen["neg"] = True
        else:
            continue
        tensor = case_tensor(case, size)
        for row in tensor:
            xs.append(row)
            ys.append(label)
            ids.append(case.patient_id)
    for side, present in seen.items():
        if not present:
            wanted = sorted(pos if side == "pos" else neg)
            raise DataError(f"stage {stage}: no cases from the {wanted} group")
    return np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64), ids
