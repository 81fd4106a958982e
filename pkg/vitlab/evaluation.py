"""Classification metrics, multi-run aggregation and prediction fusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from sklearn import metrics

from .common import MetricError, ShapeError
from .model import VisionTransformer

METRICS = ("acc", "bal_acc", "auc")
ROW_SUM_TOLERANCE = 1e-6


@dataclass
class PredictionSet:
    probabilities: np.ndarray  # N x K, rows sum to 1
    labels: np.ndarray  # N ints
    tag: Dict[str, object] = field(default_factory=dict)
    indices: Optional[np.ndarray] = None  # N sample ids within the split

    def __post_init__(self) -> None:
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.indices is None:
            self.indices = np.arange(len(self.labels))
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.validate()

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def validate(self) -> None:
        probs, labels = self.probabilities, self.labels
        if probs.ndim != 2 or labels.shape != (probs.shape[0],):
            raise ShapeError(
                f"Probabilities {probs.shape} do not match labels {labels.shape}"
            )
        if len(labels) and np.abs(probs.sum(axis=1) - 1.0).max() > ROW_SUM_TOLERANCE:
            raise MetricError("Probability rows must sum to 1")
        if len(labels) and (labels.min() < 0 or labels.max() >= probs.shape[1]):
            raise MetricError(f"Labels outside [0, {probs.shape[1]})")
        if self.indices.shape != labels.shape:
            raise ShapeError(
                f"Sample indices {self.indices.shape} do not match labels {labels.shape}"
            )
        if np.unique(self.indices).size != len(self.indices):
            raise MetricError("Sample indices must be unique")

    @property
    def predictions(self) -> np.ndarray:
        # argmax breaks ties toward the lower class index
        return np.argmax(self.probabilities, axis=1)


def predict(
    model: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 128,
    indices: Optional[np.ndarray] = None,
    **tag,
) -> PredictionSet:
    """Eval-mode class probabilities of ``model`` on ``images``.

    ``indices`` identify the samples within their split and default to
    ``0 .. N-1``.
    """
    probs = model.predict_proba(images, batch_size=batch_size)
    return PredictionSet(probs, labels, tag, indices=indices)


def confusion_matrix(preds: PredictionSet) -> np.ndarray:
    """``K x K`` counts; rows are true classes, columns predicted ones."""
    if not len(preds):
        raise MetricError("Cannot build a confusion matrix from no predictions")
    return metrics.confusion_matrix(
        preds.labels, preds.predictions, labels=np.arange(preds.num_classes)
    )


def accuracy(preds: PredictionSet) -> float:
    cm = confusion_matrix(preds)
    return float(np.trace(cm) / cm.sum())


def balanced_accuracy(cm: np.ndarray) -> float:
    """Mean per-class recall of a confusion matrix."""
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    empty = np.flatnonzero(support == 0)
    if empty.size:
        raise MetricError(f"Class {int(empty[0])} has no samples")
    return float(np.mean(np.diag(cm) / support))


def auc_one_vs_rest(preds: PredictionSet, average: str = "macro") -> float:
    """One-vs-rest ROC AUC with half credit for tied scores.

    Binary problems report the class-1 AUC. Multi-class problems average the
    per-class AUCs, unweighted (``macro``) or by class support (``weighted``).
    """
    if average not in ("macro", "weighted"):
        raise MetricError(f"Unknown AUC average '{average}'")
    labels, scores = preds.labels, preds.probabilities
    K = preds.num_classes
    present = np.unique(labels)
    if present.size < 2:
        raise MetricError(
            f"AUC needs at least two classes, got only {present.tolist()}"
        )
    if K == 2:
        return float(metrics.roc_auc_score(labels == 1, scores[:, 1]))

    missing = sorted(set(range(K)) - set(present.tolist()))
    if missing:
        raise MetricError(f"Class {missing[0]} never occurs; one-vs-rest AUC undefined")
    per_class = per_class_auc(preds)
    if average == "weighted":
        weights = np.bincount(labels, minlength=K) / len(labels)
        return float(np.dot(per_class, weights))
    return float(np.mean(per_class))


def per_class_auc(preds: PredictionSet) -> np.ndarray:
    return np.array(
        [
            metrics.roc_auc_score(preds.labels == c, preds.probabilities[:, c])
            for c in range(preds.num_classes)
        ]
    )


@dataclass
class MetricsReport:
    acc: float
    bal_acc: float
    auc: float
    confusion: np.ndarray

    @classmethod
    def from_predictions(
        cls, preds: PredictionSet, average: str = "macro"
    ) -> "MetricsReport":
        cm = confusion_matrix(preds)
        return cls(
            acc=float(np.trace(cm) / cm.sum()),
            bal_acc=balanced_accuracy(cm),
            auc=auc_one_vs_rest(preds, average=average),
            confusion=cm,
        )

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "bal_acc": self.bal_acc,
            "auc": self.auc,
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricsReport":
        return cls(
            acc=float(data["acc"]),
            bal_acc=float(data["bal_acc"]),
            auc=float(data["auc"]),
            confusion=np.asarray(data["confusion"], dtype=np.int64),
        )


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float


def aggregate_runs(reports: Sequence[MetricsReport]) -> Dict[str, MetricSummary]:
    """Mean and sample standard deviation (divisor n - 1) of each metric;
    the deviation of a single run is 0."""
    if not reports:
        raise MetricError("Cannot aggregate an empty list of runs")
    summary = {}
    for name in METRICS:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        # offsets from the first run keep identical runs at exactly std 0
        offsets = values - values[0]
        std = float(np.std(offsets, ddof=1)) if len(values) > 1 else 0.0
        summary[name] = MetricSummary(float(values[0] + offsets.mean()), std)
    return summary


def ensemble_average(members: Iterable[PredictionSet], **tag) -> PredictionSet:
    """Elementwise mean of the members' probability matrices."""
    members: List[PredictionSet] = list(members)
    if not members:
        raise MetricError("Cannot ensemble zero members")
    first = members[0]
    for other in members[1:]:
        if other.probabilities.shape != first.probabilities.shape:
            raise ShapeError(
                f"Ensemble members disagree on shape: {first.probabilities.shape} "
                f"vs {other.probabilities.shape}"
            )
        if not np.array_equal(other.indices, first.indices):
            raise MetricError("Ensemble members disagree on sample order")
        if not np.array_equal(other.labels, first.labels):
            raise MetricError("Ensemble members disagree on labels")
    mean = np.mean([m.probabilities for m in members], axis=0)
    return PredictionSet(
        mean,
        first.labels.copy(),
        tag or {"members": len(members)},
        indices=first.indices.copy(),
    )
