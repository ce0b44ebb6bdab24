"""Evaluation math: Dice overlap, confusion matrices, ROC/AUC, and the
cascade accuracy aggregation used for the overall diagnosis score."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .masks import BinaryMask

# published overall accuracy the aggregation is compared against
REFERENCE_OVERALL_ACCURACY = 0.972


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Overlap coefficient 2|A n B| / (|A| + |B|).

    Two empty masks score 1.0: absent structure, absent prediction is a
    perfect match (apical slices often lack the right ventricle).
    """
    if a.grid.data.shape != b.grid.data.shape:
        raise ValueError(
            f"mask dimensions differ: {a.grid.data.shape} vs {b.grid.data.shape}"
        )
    am = a.grid.data > 0
    bm = b.grid.data > 0
    total = int(am.sum()) + int(bm.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((am & bm).sum()) / total


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows indexed by truth and columns by prediction."""

    labels: Tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.labels)
        if self.counts.shape != (n, n):
            raise ValueError(f"counts must be {n}x{n}, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("negative count")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_pairs(
        cls, labels: Sequence[str], pairs: Sequence[Tuple[str, str]]
    ) -> "ConfusionMatrix":
        index = {label: i for i, label in enumerate(labels)}
        counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
        for truth, predicted in pairs:
            counts[index[truth], index[predicted]] += 1
        return cls(tuple(labels), counts)


@dataclass(frozen=True)
class ClassMetrics:
    """Per-class scores; None marks a zero-denominator cell (no predicted
    positives, or no actual positives), which must not read as 0."""

    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]


def classification_metrics(cm: ConfusionMatrix) -> Tuple[Dict[str, ClassMetrics], float]:
    """Standard per-class precision/recall/F1 plus overall accuracy."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    per_class: Dict[str, ClassMetrics] = {}
    for i, label in enumerate(cm.labels):
        tp = int(cm.counts[i, i])
        predicted = int(cm.counts[:, i].sum())
        actual = int(cm.counts[i, :].sum())
        precision = tp / predicted if predicted else None
        recall = tp / actual if actual else None
        if precision is None or recall is None or precision + recall == 0:
            f1 = None
        else:
            f1 = 2 * precision * recall / (precision + recall)
        per_class[label] = ClassMetrics(precision, recall, f1)
    accuracy = float(np.trace(cm.counts)) / cm.total
    return per_class, accuracy


@dataclass(frozen=True)
class RocCurve:
    """Staircase from (0,0) to (1,1); area computed by trapezoids."""

    points: Tuple[Tuple[float, float], ...]
    auc: float


def roc_auc(scores: Sequence[Tuple[float, bool]]) -> RocCurve:
    """Sweep thresholds over the distinct scores, descending.

    Tied scores move as one step, which draws the diagonal segment the
    Mann-Whitney statistic expects for ties.
    """
    n_pos = sum(1 for _, flag in scores if flag)
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    ordered = sorted(scores, key=lambda item: -item[0])
    points: List[Tuple[float, float]] = [(0.0, 0.0)]
    auc = 0.0
    tp = fp = 0
    i = 0
    while i < len(ordered):
        j = i
        while j < len(ordered) and ordered[j][0] == ordered[i][0]:
            if ordered[j][1]:
                tp += 1
            else:
                fp += 1
            j += 1
        x, y = fp / n_neg, tp / n_pos
        auc += (x - points[-1][0]) * (y + points[-1][1]) / 2.0
        points.append((x, y))
        i = j
    return RocCurve(tuple(points), auc)


@dataclass(frozen=True)
class AggregateAccuracy:
    per_classifier: Tuple[float, float, float, float]
    per_class: Dict[str, float]
    overall: float

    @property
    def reference_delta(self) -> float:
        """Signed gap between the recomputed overall accuracy and the
        published figure; nonzero values get flagged in reports."""
        return self.overall - REFERENCE_OVERALL_ACCURACY


def aggregate_accuracy(a1: float, a2: float, a3: float, a4: float) -> AggregateAccuracy:
    """Combine the four stage accuracies into per-class and overall scores.

    A class's accuracy is the mean of the stages its decision path visits:
    NOR and ARV pass stages 1-2, HCM stages 1 and 3, MINF and DCM stages
    1, 3, and 4. The overall score is the mean of the five class scores.
    """
    for name, value in (("a1", a1), ("a2", a2), ("a3", a3), ("a4", a4)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0,1], got {value}")
    a_nor = a_arv = (a1 + a2) / 2.0
    a_hcm = (a1 + a3) / 2.0
    a_minf = a_dcm = (a1 + a3 + a4) / 3.0
    per_class = {
        "NOR": a_nor,
        "ARV": a_arv,
        "HCM": a_hcm,
        "MINF": a_minf,
        "DCM": a_dcm,
    }
    overall = sum(per_class.values()) / len(per_class)
    return AggregateAccuracy((a1, a2, a3, a4), per_class, overall)
