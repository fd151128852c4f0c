"""Confusion-matrix accounting and recall-based metrics.

WAR weighs classes by support (plain accuracy); UAR averages per-class
recalls so rare classes count equally. Classes with zero support are
excluded from the UAR mean and logged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """counts[i, j] = number of samples with true class i predicted as j."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix entries must be nonnegative")

    @classmethod
    def zeros(cls, n_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @classmethod
    def from_predictions(cls, true, pred, n_classes: int) -> "ConfusionMatrix":
        true = np.asarray(true, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if true.shape != pred.shape:
            raise ValueError("true and pred must have the same length")
        for name, arr in (("true", true), ("pred", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
                raise ValueError(f"{name} labels outside [0, {n_classes})")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (true, pred), 1)
        return cls(counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class MetricsReport:
    uar: float
    war: float
    per_class_recall: np.ndarray
    excluded_classes: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "uar": self.uar,
            "war": self.war,
            "per_class_recall": [float(r) for r in self.per_class_recall],
            "excluded_classes": list(self.excluded_classes),
        }

    def __str__(self) -> str:
        recalls = ", ".join(f"{r:.4f}" for r in self.per_class_recall)
        return f"UAR {self.uar:.4f} | WAR {self.war:.4f} | per-class [{recalls}]"


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class recall, unweighted and weighted average recall."""
    support = cm.support
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is all-zero; nothing was evaluated")
    diag = np.diag(cm.counts)
    recall = np.zeros(cm.n_classes, dtype=np.float64)
    nonzero = support > 0
    recall[nonzero] = diag[nonzero] / support[nonzero]
    excluded = [int(k) for k in np.flatnonzero(~nonzero)]
    if excluded:
        logger.info("classes with zero support excluded from UAR: %s", excluded)
    uar = float(recall[nonzero].mean())
    war = float(np.trace(cm.counts) / total)
    return MetricsReport(
        uar=uar, war=war, per_class_recall=recall, excluded_classes=excluded
    )


def argmax_lowest_index(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax with ties broken toward the lowest class index."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ValueError(f"expected (N, C) scores, got {scores.shape}")
    return scores.argmax(axis=1)
