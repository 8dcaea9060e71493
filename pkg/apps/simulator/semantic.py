"""
Semantic map rasters and mIoU scoring.

Scoring goes through a 4x4 confusion matrix so frame results can be summed
into trip results before the ratio is taken.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from apps.common.exceptions import ShapeError

CLASSES = ("background", "divider", "crossing", "boundary")
BACKGROUND, DIVIDER, CROSSING, BOUNDARY = range(len(CLASSES))
SCORED_CLASSES = (DIVIDER, CROSSING, BOUNDARY)


@dataclass
class SemanticMap:
    """Hard labels [rows, cols] plus optional class scores [rows, cols, 4]."""

    labels: np.ndarray
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeError(f"labels must be 2-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= len(CLASSES)):
            raise ShapeError("labels outside the class range")
        self.labels = labels.astype(np.uint8, copy=False)
        if self.scores is not None:
            if self.scores.shape != labels.shape + (len(CLASSES),):
                raise ShapeError(f"scores {self.scores.shape} do not match labels {labels.shape}")
            if not np.isfinite(self.scores).all():
                raise ShapeError("scores must be finite")

    @classmethod
    def filled(cls, rows: int, cols: int, label: int = BACKGROUND) -> "SemanticMap":
        return cls(np.full((rows, cols), label, dtype=np.uint8))

    @property
    def shape(self):
        return self.labels.shape

    def one_hot(self) -> np.ndarray:
        return np.eye(len(CLASSES), dtype=np.float32)[self.labels]

    def class_fractions(self) -> Dict[str, float]:
        counts = np.bincount(self.labels.ravel(), minlength=len(CLASSES))
        total = max(int(self.labels.size), 1)
        return {name: counts[i] / total for i, name in enumerate(CLASSES)}


def confusion_matrix(pred: SemanticMap, gt: SemanticMap) -> np.ndarray:
    """[gt class, predicted class] pixel counts."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    n = len(CLASSES)
    index = gt.labels.astype(np.int64).ravel() * n + pred.labels.astype(np.int64).ravel()
    return np.bincount(index, minlength=n * n).reshape(n, n)


@dataclass
class IoUReport:
    per_class: Dict[str, Optional[float]]
    mean: Optional[float]

    def as_dict(self) -> dict:
        return {"per_class": dict(self.per_class), "miou": self.mean}


def iou_from_confusion(confusion: np.ndarray) -> IoUReport:
    gt_count = confusion.sum(axis=1)
    pred_count = confusion.sum(axis=0)
    hits = np.diag(confusion)
    union = gt_count + pred_count - hits

    per_class: Dict[str, Optional[float]] = {}
    for c in SCORED_CLASSES:
        # absent from both maps: undefined, kept out of the mean
        per_class[CLASSES[c]] = float(hits[c] / union[c]) if union[c] > 0 else None
    defined = [v for v in per_class.values() if v is not None]
    mean = float(np.mean(defined)) if defined else None
    return IoUReport(per_class, mean)


def evaluate_miou(pred: SemanticMap, gt: SemanticMap) -> IoUReport:
    return iou_from_confusion(confusion_matrix(pred, gt))


@dataclass
class IoUAccumulator:
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((len(CLASSES),) * 2, dtype=np.int64))

    def add(self, pred: SemanticMap, gt: SemanticMap) -> IoUReport:
        frame = confusion_matrix(pred, gt)
        self.confusion += frame
        return iou_from_confusion(frame)

    def result(self) -> IoUReport:
        return iou_from_confusion(self.confusion)
