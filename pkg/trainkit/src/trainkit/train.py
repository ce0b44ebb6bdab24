"""Training entry points.

Segmentation follows the two-phase recipe: the residual encoder stays
frozen while the decoder head trains, then the whole network fine-tunes.
Classifiers train in a single phase with Adam, categorical cross-entropy
over the two-way softmax, and early stopping on validation loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .data import (
    Case,
    DataError,
    STRUCTURE_LABELS,
    load_cases,
    segmentation_samples,
    stage_rows,
)
from .export import export_model
from .models import CascadeClassifierNet, SegmentationNet

log = logging.getLogger("trainkit")

SEG_ROLES = ("localizer", "segmenter")


class TrainError(ValueError):
    pass


class TrainDataError(TrainError):
    pass


@dataclass(frozen=True)
class TrainSpec:
    """What to train, on which data, and where to export."""

    role: str                # "localizer:RV" | "segmenter:MYO" | "classifier:3" ...
    input_size: int
    dataset_root: Path
    export_path: Path
    epochs_head: int = 10
    epochs_finetune: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-3
    val_fraction: float = 0.2
    patience: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        kind, target = self.parsed_role
        if kind in SEG_ROLES:
            if target not in STRUCTURE_LABELS:
                raise TrainError(f"{kind} role needs a structure in RV/MYO/LV, got {target!r}")
            if self.input_size % 32 != 0:
                raise TrainError(
                    f"segmentation input size must be a multiple of 32, got {self.input_size}"
                )
        elif kind == "classifier":
            if target not in ("1", "2", "3", "4"):
                raise TrainError(f"classifier role needs a stage 1..4, got {target!r}")
        else:
            raise TrainError(f"unknown role kind {kind!r}")
        if self.input_size < 32:
            raise TrainError(f"input size must be >= 32, got {self.input_size}")
        for name in ("epochs_head", "epochs_finetune", "batch_size"):
            if getattr(self, name) < 1:
                raise TrainError(f"{name} must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise TrainError(f"val_fraction must lie in [0,1), got {self.val_fraction}")

    @property
    def parsed_role(self) -> Tuple[str, str]:
        kind, _, target = self.role.partition(":")
        return kind.strip(), target.strip()


@dataclass(frozen=True)
class TrainResult:
    export_path: Path
    epochs_run: int
    train_metric: float                  # Dice for segmentation, accuracy for classifiers
    history: Tuple[float, ...] = field(default=())


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def _dice_scores(pred: np.ndarray, truth: np.ndarray) -> List[float]:
    scores = []
    for p, t in zip(pred, truth):
        a = p > 0.5
        b = t > 0.5
        total = int(a.sum()) + int(b.sum())
        scores.append(1.0 if total == 0 else 2.0 * int((a & b).sum()) / total)
    return scores


def train_segmentation(spec: TrainSpec) -> TrainResult:
    kind, structure = spec.parsed_role
    if kind not in SEG_ROLES:
        raise TrainError(f"train_segmentation needs a localizer/segmenter role, got {spec.role!r}")
    cases = load_cases(spec.dataset_root)
    try:
        x, y = segmentation_samples(
            cases, structure, crop_to_structure=(kind == "segmenter"), size=spec.input_size
        )
    except DataError as exc:
        raise TrainDataError(str(exc))

    torch.manual_seed(spec.seed)
    rng = np.random.default_rng(spec.seed)
    net = SegmentationNet()
    loss_fn = nn.BCELoss()
    inputs = torch.from_numpy(x)
    targets = torch.from_numpy(y)
    history: List[float] = []

    phases = (
        ("head", spec.epochs_head, False),
        ("finetune", spec.epochs_finetune, True),
    )
    for label, epochs, train_encoder in phases:
        for p in net.encoder.parameters():
            p.requires_grad = train_encoder
        params = [p for p in net.parameters() if p.requires_grad]
        opt = torch.optim.Adam(params, lr=spec.learning_rate)
        net.train()
        for epoch in range(epochs):
            total = 0.0
            for idx in _batches(len(inputs), spec.batch_size, rng):
                opt.zero_grad()
                out = net(inputs[idx])
                loss = loss_fn(out, targets[idx])
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
            history.append(total / len(inputs))
            log.info("%s %s epoch %d loss %.4f", spec.role, label, epoch + 1, history[-1])

    net.eval()
    with torch.no_grad():
        pred = net(inputs).numpy()
    train_dice = float(np.mean(_dice_scores(pred[:, 0], y[:, 0])))
    path = export_model(net, spec.export_path)
    return TrainResult(path, len(history), train_dice, tuple(history))


def _split_by_case(
    ids: Sequence[str], fraction: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    unique = sorted(set(ids))
    shuffled = list(rng.permutation(unique))
    n_val = int(round(len(shuffled) * fraction))
    val_cases = set(shuffled[:n_val])
    ids_arr = np.asarray(ids)
    val = np.isin(ids_arr, sorted(val_cases))
    if not val.any() or val.all():
        return np.ones(len(ids), dtype=bool), np.ones(len(ids), dtype=bool)
    return ~val, val


def _case_accuracy(scores: np.ndarray, labels: np.ndarray, ids: Sequence[str]) -> float:
    """Row softmax scores pooled per case, thresholded at 0.5."""
    by_case = {}
    for score, label, case in zip(scores, labels, ids):
        by_case.setdefault(case, ([], int(label)))[0].append(float(score))
    hits = sum(
        1 for values, label in by_case.values() if (np.mean(values) >= 0.5) == bool(label)
    )
    return hits / len(by_case)


def train_classifier(spec: TrainSpec) -> TrainResult:
    kind, target = spec.parsed_role
    if kind != "classifier":
        raise TrainError(f"train_classifier needs a classifier role, got {spec.role!r}")
    stage = int(target)
    cases = load_cases(spec.dataset_root)
    try:
        x, labels, ids = stage_rows(cases, stage, spec.input_size)
    except DataError as exc:
        raise TrainDataError(str(exc))

    torch.manual_seed(spec.seed)
    rng = np.random.default_rng(spec.seed)
    train_mask, val_mask = _split_by_case(ids, spec.val_fraction, rng)
    inputs = torch.from_numpy(x)
    target_t = torch.from_numpy(labels)
    net = CascadeClassifierNet()
    # categorical cross-entropy; computed on logits for stability, the
    # exported graph still ends in the explicit softmax
    loss_fn = nn.CrossEntropyLoss()
    opt = torch.optim.Adam(net.parameters(), lr=spec.learning_rate)
    max_epochs = spec.epochs_head + spec.epochs_finetune

    train_idx = np.flatnonzero(train_mask)
    val_idx = np.flatnonzero(val_mask)
    best_loss = float("inf")
    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    stale = 0
    history: List[float] = []
    epochs_run = 0

    for epoch in range(max_epochs):
        net.train()
        for idx in _batches(len(train_idx), spec.batch_size, rng):
            rows = train_idx[idx]
            opt.zero_grad()
            loss = loss_fn(net.logits(inputs[rows]), target_t[rows])
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            val_loss = float(loss_fn(net.logits(inputs[val_idx]), target_t[val_idx]))
        history.append(val_loss)
        epochs_run = epoch + 1
        log.info("%s epoch %d val loss %.4f", spec.role, epochs_run, val_loss)
        if val_loss < best_loss - 1e-6:
            best_loss = val_loss
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale > spec.patience:
                log.info("%s early stop after %d epochs", spec.role, epochs_run)
                break

    net.load_state_dict(best_state)
    net.eval()
    with torch.no_grad():
        scores = net(inputs).numpy()[:, 1]
    accuracy = _case_accuracy(scores, labels, ids)
    path = export_model(net, spec.export_path)
    return TrainResult(path, epochs_run, accuracy, tuple(history))
