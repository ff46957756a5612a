"""Top-1 / many-medium-few accuracy, confusion matrices and calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GROUPS = ("many", "medium", "few")


@dataclass(frozen=True)
class GroupSpec:
    """Many: train count > many_threshold; few: < few_threshold; else medium."""

    many_threshold: int = 100
    few_threshold: int = 20

    def __post_init__(self):
        if self.few_threshold > self.many_threshold:
            raise ValueError("few_threshold must not exceed many_threshold")

    def assign(self, train_counts) -> dict[str, list[int]]:
        groups = {g: [] for g in GROUPS}
        for c, n in enumerate(train_counts):
            if n > self.many_threshold:
                groups["many"].append(c)
            elif n < self.few_threshold:
                groups["few"].append(c)
            else:
                groups["medium"].append(c)
        return groups


@dataclass(frozen=True)
class CalibrationReport:
    edges: np.ndarray
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray
    ece: float

    def rows(self):
        for b in range(len(self.counts)):
            yield (self.edges[b], self.edges[b + 1], int(self.counts[b]),
                   self.accuracy[b], self.confidence[b])


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    for name, arr in (("prediction", predictions), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} class id out of range [0, {num_classes})")
    flat = labels * num_classes + predictions
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def per_class_accuracy(predictions, labels, num_classes: int) -> np.ndarray:
    """Accuracy per class; NaN for classes without samples."""
    cm = confusion_matrix(predictions, labels, num_classes)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / support, np.nan)


def group_accuracy(predictions, labels, train_counts, groups: GroupSpec = GroupSpec()):
    """Mean per-class accuracy within each group; ``None`` if a group has no
    evaluable class."""
    acc = per_class_accuracy(predictions, labels, len(train_counts))
    out = {}
    for name, members in groups.assign(train_counts).items():
        vals = [acc[c] for c in members if not np.isnan(acc[c])]
        out[name] = float(np.mean(vals)) if vals else None
    return out


def calibration(confidences, correct, n_bins: int = 15) -> CalibrationReport:
    """Equal-width, right-closed bins over (0, 1]; ECE in percent."""
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if n_bins < 1:
        raise ValueError("need at least one bin")
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges, confidences, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=confidences, minlength=n_bins)
    safe = np.maximum(counts, 1)
    accuracy = np.where(counts > 0, acc_sum / safe, 0.0)
    confidence = np.where(counts > 0, conf_sum / safe, 0.0)
    n = max(len(confidences), 1)
    ece = float(np.sum(counts / n * np.abs(accuracy - confidence)) * 100.0)
    return CalibrationReport(edges, counts, accuracy, confidence, ece)


@dataclass(frozen=True)
class Evaluation:
    top1: float
    groups: dict
    calibration: CalibrationReport
    confusion: np.ndarray
    predictions: np.ndarray
    confidences: np.ndarray


def evaluate_predictions(predictions, confidences, labels, train_counts,
                         groups: GroupSpec = GroupSpec(), n_bins: int = 15) -> Evaluation:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    num_classes = len(train_counts)
    correct = predictions == labels
    return Evaluation(
        top1=float(correct.mean()),
        groups=group_accuracy(predictions, labels, train_counts, groups),
        calibration=calibration(confidences, correct, n_bins),
        confusion=confusion_matrix(predictions, labels, num_classes),
        predictions=predictions,
        confidences=np.asarray(confidences, dtype=np.float64),
    )
