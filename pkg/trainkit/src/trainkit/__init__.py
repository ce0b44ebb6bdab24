"""Training and export toolkit for the cardiac analysis engine.

Produces portable ONNX model files consumable by the inference engine's
``model:`` backends; consumes datasets in the same on-disk layout the
engine reads. The two packages share no code, only those file formats.
"""

from .train import (
    TrainDataError,
    TrainError,
    TrainResult,
    TrainSpec,
    train_classifier,
    train_segmentation,
)

__all__ = [
    "TrainDataError",
    "TrainError",
    "TrainResult",
    "TrainSpec",
    "train_classifier",
    "train_segmentation",
]
