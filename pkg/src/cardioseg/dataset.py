"""Dataset handling: ACDC-style directory loading, case records, and a
deterministic synthetic phantom generator.

The phantom generator is a first-class citizen, not test scaffolding:
it produces short-axis stacks with class-dependent geometry (thickened
wall for HCM, dilated cavity for DCM, enlarged right ventricle for ARV,
regional wall thinning for MINF) plus matching ground-truth label maps,
so every quantitative check can run without the real dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cascade import PathologyClass
from .grid import Grid2D, Volume3D
from .masks import LabelMask, Structure
from . import niftiio

GROUP_TOKENS = {
    "NOR": PathologyClass.NOR,
    "RV": PathologyClass.ARV,  # ACDC metadata spells the class "RV"
    "ARV": PathologyClass.ARV,
    "HCM": PathologyClass.HCM,
    "MINF": PathologyClass.MINF,
    "DCM": PathologyClass.DCM,
}
TOKEN_BY_CLASS = {
    PathologyClass.NOR: "NOR",
    PathologyClass.ARV: "RV",
    PathologyClass.HCM: "HCM",
    PathologyClass.MINF: "MINF",
    PathologyClass.DCM: "DCM",
}
REQUIRED_METADATA = ("ED", "ES", "Group", "Height", "Weight")

DEFAULT_SPACING = (1.5, 1.5, 10.0)


class DatasetError(ValueError):
    """Loading failed for one patient; carries the patient id and the
    offending key or file."""

    def __init__(self, patient: str, key: str, message: str) -> None:
        super().__init__(f"{patient}: {key}: {message}")
        self.patient = patient
        self.key = key


@dataclass(frozen=True)
class CaseRecord:
    patient_id: str
    group: PathologyClass
    ed_frame: int
    es_frame: int
    ed_volume: Volume3D
    es_volume: Volume3D
    ed_gt: Optional[Tuple[LabelMask, ...]] = None
    es_gt: Optional[Tuple[LabelMask, ...]] = None
    height: float = 0.0
    weight: float = 0.0

    def __post_init__(self) -> None:
        if self.ed_frame == self.es_frame:
            raise ValueError(f"{self.patient_id}: ED and ES frames coincide")
        for name, volume, gt in (
            ("ED", self.ed_volume, self.ed_gt),
            ("ES", self.es_volume, self.es_gt),
        ):
            if gt is None:
                continue
            if len(gt) != volume.data.shape[0]:
                raise ValueError(
                    f"{self.patient_id}: {name} has {volume.data.shape[0]} slices "
                    f"but {len(gt)} ground-truth masks"
                )
            for mask in gt:
                if mask.grid.data.shape != volume.data.shape[1:]:
                    raise ValueError(
                        f"{self.patient_id}: {name} mask shape "
                        f"{mask.grid.data.shape} != slice {volume.data.shape[1:]}"
                    )

    def gt_for(self, phase: str) -> Optional[Tuple[LabelMask, ...]]:
        return self.ed_gt if phase == "ED" else self.es_gt

    def volume_for(self, phase: str) -> Volume3D:
        return self.ed_volume if phase == "ED" else self.es_volume


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[str, ...]
    test: Tuple[str, ...]

    def __post_init__(self) -> None:
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"cases in both splits: {sorted(overlap)}")


def _parse_metadata(path: Path, patient: str) -> Dict[str, str]:
    if not path.is_file():
        raise DatasetError(patient, "Info.cfg", "metadata file missing")
    pairs: Dict[str, str] = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise DatasetError(patient, "Info.cfg", f"not a key: value line: {line!r}")
        key, value = line.split(":", 1)
        pairs[key.strip()] = value.strip()
    for key in REQUIRED_METADATA:
        if key not in pairs:
            raise DatasetError(patient, key, "required metadata key missing")
    return pairs


def _parse_frame_index(raw: str, patient: str, key: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise DatasetError(patient, key, f"frame index {raw!r} is not an integer")


def _frame_path(directory: Path, patient: str, frame: int, gt: bool) -> Optional[Path]:
    suffix = "_gt" if gt else ""
    for ext in (".nii.gz", ".nii"):
        candidate = directory / f"{patient}_frame{frame:02d}{suffix}{ext}"
        if candidate.is_file():
            return candidate
    return None


def _load_gt_stack(path: Path, patient: str) -> Tuple[LabelMask, ...]:
    volume = niftiio.read_nifti_file(path).to_volume3d()
    masks = []
    for k in range(volume.data.shape[0]):
        try:
            masks.append(LabelMask(volume.plane(k)))
        except ValueError as exc:
            raise DatasetError(patient, path.name, str(exc)) from exc
    return tuple(masks)


def _load_case(directory: Path) -> CaseRecord:
    patient = directory.name
    meta = _parse_metadata(directory / "Info.cfg", patient)
    group_token = meta["Group"]
    if group_token not in GROUP_TOKENS:
        raise DatasetError(patient, "Group", f"unknown class {group_token!r}")
    ed = _parse_frame_index(meta["ED"], patient, "ED")
    es = _parse_frame_index(meta["ES"], patient, "ES")

    volumes = {}
    gts = {}
    for key, frame in (("ED", ed), ("ES", es)):
        path = _frame_path(directory, patient, frame, gt=False)
        if path is None:
            raise DatasetError(patient, key, f"no volume file for frame {frame}")
        try:
            volumes[key] = niftiio.read_nifti_file(path).to_volume3d()
        except niftiio.NiftiFormatError as exc:
            raise DatasetError(patient, path.name, str(exc)) from exc
        gt_path = _frame_path(directory, patient, frame, gt=True)
        gts[key] = _load_gt_stack(gt_path, patient) if gt_path else None

    return CaseRecord(
        patient_id=patient,
        group=GROUP_TOKENS[group_token],
        ed_frame=ed,
        es_frame=es,
        ed_volume=volumes["ED"],
        es_volume=volumes["ES"],
        ed_gt=gts["ED"],
        es_gt=gts["ES"],
        height=float(meta["Height"]),
        weight=float(meta["Weight"]),
    )


def load_dataset(root) -> Tuple[List[CaseRecord], DatasetSplit]:
    """Read every patient directory under ``root``.

    Accepts either the split layout (training/ and testing/ subtrees) or a
    flat directory of patients (all assigned to train). No directory is
    skipped silently: each yields a record or a DatasetError.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(str(root), "root", "dataset directory does not exist")

    def patient_dirs(base: Path) -> List[Path]:
        return sorted(
            d for d in base.iterdir() if d.is_dir() and d.name.startswith("patient")
        )

    buckets = {"train": [], "test": []}
    records: List[CaseRecord] = []
    sections = []
    if (root / "training").is_dir() or (root / "testing").is_dir():
        if (root / "training").is_dir():
            sections.append(("train", root / "training"))
        if (root / "testing").is_dir():
            sections.append(("test", root / "testing"))
    else:
        sections.append(("train", root))
    for bucket, base in sections:
        for directory in patient_dirs(base):
            record = _load_case(directory)
            records.append(record)
            buckets[bucket].append(record.patient_id)
    return records, DatasetSplit(tuple(buckets["train"]), tuple(buckets["test"]))


# phantom geometry fractions of the half-image, per class: cavity radius,
# wall thickness, right-ventricle radius, systolic contraction factor
_CLASS_GEOMETRY = {
    PathologyClass.NOR: (0.30, 0.12, 0.28, 0.75),
    PathologyClass.ARV: (0.30, 0.12, 0.45, 0.78),
    PathologyClass.HCM: (0.22, 0.26, 0.28, 0.72),
    PathologyClass.MINF: (0.32, 0.12, 0.28, 0.90),
    PathologyClass.DCM: (0.48, 0.08, 0.28, 0.95),
}


def _paint_slice(
    shape: Tuple[int, int],
    center: Tuple[float, float],
    r_cavity: float,
    thickness: float,
    r_rv: float,
    thin_sector: Optional[Tuple[float, float]],
) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = center
    r = np.hypot(xx - cx, yy - cy)
    outer = np.full(shape, r_cavity + thickness)
    if thin_sector is not None:
        theta = np.arctan2(yy - cy, xx - cx)
        start, width = thin_sector
        in_sector = ((theta - start) % (2 * math.pi)) < width
        outer[in_sector] = r_cavity + 0.4 * thickness
    labels = np.zeros(shape)
    rv_cx = cx - (r_cavity + thickness + 0.7 * r_rv)
    r_rv_dist = np.hypot(xx - rv_cx, yy - cy)
    labels[(r_rv_dist < r_rv) & (r >= outer)] = Structure.RV.label
    labels[(r >= r_cavity) & (r < outer)] = Structure.MYO.label
    labels[r < r_cavity] = Structure.LV.label
    return labels


def make_phantom(
    seed: int,
    group: PathologyClass,
    dims: Tuple[int, int, int] = (6, 128, 128),
    patient_id: Optional[str] = None,
    spacing: Tuple[float, float, float] = DEFAULT_SPACING,
) -> CaseRecord:
    """Deterministic synthetic case: same (seed, group, dims) twice gives
    identical volumes and masks."""
    n_slices, h, w = dims
    class_index = list(PathologyClass).index(group)
    rng = np.random.default_rng((seed, class_index, n_slices, h, w))
    unit = min(h, w) / 2.0
    f_cavity, f_wall, f_rv, contraction = _CLASS_GEOMETRY[group]
    # small jitter keeps cases distinct without breaking class ordering
    f_cavity *= rng.uniform(0.95, 1.05)
    f_wall *= rng.uniform(0.95, 1.05)
    f_rv *= rng.uniform(0.95, 1.05)
    center = (
        w / 2.0 + rng.uniform(-0.04, 0.04) * w,
        h / 2.0 + rng.uniform(-0.04, 0.04) * h,
    )
    thin_sector = None
    if group is PathologyClass.MINF:
        thin_sector = (rng.uniform(0, 2 * math.pi), math.pi / 3)

    xs = np.mgrid[0:h, 0:w][1].astype(np.float64)
    gradient = 0.15 + 0.1 * xs / max(1, w - 1)  # mild shading, breaks symmetry
    phases = {}
    for phase, scale in (("ED", 1.0), ("ES", contraction)):
        labels_stack = []
        intensity_stack = []
        for k in range(n_slices):
            taper = 0.7 + 0.3 * (k / max(1, n_slices - 1))  # apex first, smallest
            r_cavity = f_cavity * unit * taper * scale
            thickness = f_wall * unit * taper * (2.0 - scale)  # wall thickens at ES
            r_rv = f_rv * unit * taper * scale
            labels = _paint_slice((h, w), center, r_cavity, thickness, r_rv, thin_sector)
            noise = rng.normal(0.0, 0.03, size=(h, w))
            intensity = gradient.copy()
            intensity[labels == Structure.RV.label] = 0.85
            intensity[labels == Structure.MYO.label] = 0.45
            intensity[labels == Structure.LV.label] = 0.9
            intensity = np.clip(intensity + noise, 0.0, 1.0)
            labels_stack.append(labels)
            intensity_stack.append(intensity)
        phases[phase] = (
            Volume3D(np.stack(intensity_stack), spacing=spacing),
            tuple(
                LabelMask(Grid2D(a, spacing=spacing[:2])) for a in labels_stack
            ),
        )
    return CaseRecord(
        patient_id=patient_id or f"phantom-{group.value}-{seed:04d}",
        group=group,
        ed_frame=1,
        es_frame=2,
        ed_volume=phases["ED"][0],
        es_volume=phases["ES"][0],
        ed_gt=phases["ED"][1],
        es_gt=phases["ES"][1],
        height=float(np.round(rng.uniform(150, 190), 1)),
        weight=float(np.round(rng.uniform(50, 110), 1)),
    )


def _masks_to_volume(masks: Sequence[LabelMask]) -> np.ndarray:
    return np.stack([m.grid.data for m in masks]).astype(np.uint8)


def write_case(record: CaseRecord, directory: Path) -> None:
    """Serialize one case in the on-disk patient layout."""
    directory.mkdir(parents=True, exist_ok=True)
    pid = record.patient_id
    lines = [
        f"ED: {record.ed_frame}",
        f"ES: {record.es_frame}",
        f"Group: {TOKEN_BY_CLASS[record.group]}",
        f"Height: {record.height}",
        f"NbFrame: {max(record.ed_frame, record.es_frame)}",
        f"Weight: {record.weight}",
    ]
    (directory / "Info.cfg").write_text("\n".join(lines) + "\n")
    spacing = record.ed_volume.spacing
    for frame, volume, gt in (
        (record.ed_frame, record.ed_volume, record.ed_gt),
        (record.es_frame, record.es_volume, record.es_gt),
    ):
        vol = niftiio.from_array(volume.data.astype(np.float32), spacing=spacing)
        niftiio.write_nifti_file(vol, directory / f"{pid}_frame{frame:02d}.nii.gz")
        if gt is not None:
            gt_vol = niftiio.from_array(_masks_to_volume(gt), spacing=spacing)
            niftiio.write_nifti_file(
                gt_vol, directory / f"{pid}_frame{frame:02d}_gt.nii.gz"
            )


def write_phantom_tree(
    root,
    per_class: int = 30,
    test_per_class: Optional[int] = None,
    seed: int = 0,
    dims: Tuple[int, int, int] = (6, 128, 128),
) -> DatasetSplit:
    """Generate a full synthetic dataset tree in the split layout.

    The default composition mirrors the public distribution: 30 cases per
    class, one third held out for testing.
    """
    root = Path(root)
    if test_per_class is None:
        test_per_class = per_class // 3
    train_per_class = per_class - test_per_class
    train_ids: List[str] = []
    test_ids: List[str] = []
    counter = 1
    for bucket, count_per_class in (("training", train_per_class), ("testing", test_per_class)):
        for group in PathologyClass:
            for i in range(count_per_class):
                pid = f"patient{counter:03d}"
                counter += 1
                record = make_phantom(
                    seed=seed + counter, group=group, dims=dims, patient_id=pid
                )
                write_case(record, root / bucket / pid)
                (train_ids if bucket == "training" else test_ids).append(pid)
    return DatasetSplit(tuple(train_ids), tuple(test_ids))
