"""Accuracy and H-score over pooled stream predictions."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class MetricError(ValueError):
    pass


def _pair(predictions, ground_truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(predictions)
    truth = np.asarray(ground_truth)
    if pred.shape != truth.shape:
        raise MetricError(f"{len(pred)} predictions but {len(truth)} labels")
    if pred.size == 0:
        raise MetricError("cannot score an empty prediction set")
    return pred, truth


def accuracy(predictions, ground_truth) -> float:
    """Fraction of exact matches; the unknown label counts as an ordinary label."""
    pred, truth = _pair(predictions, ground_truth)
    return float(np.mean(pred == truth))


def harmonic_mean(a: float, b: float) -> float:
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


def known_unknown_accuracy(predictions, ground_truth, unknown_label: int) -> tuple[float, float]:
    pred, truth = _pair(predictions, ground_truth)
    is_unknown = truth == unknown_label
    if is_unknown.all() or not is_unknown.any():
        raise MetricError(
            "H-score needs both known and unknown ground-truth samples; use accuracy for partial-set streams"
        )
    a_k = float(np.mean(pred[~is_unknown] == truth[~is_unknown]))
    a_u = float(np.mean(pred[is_unknown] == unknown_label))
    return a_k, a_u


def h_score(predictions, ground_truth, unknown_label: int) -> float:
    return harmonic_mean(*known_unknown_accuracy(predictions, ground_truth, unknown_label))


@dataclass
class MetricSummary:
    accuracy_all: float
    accuracy_known: float | None
    accuracy_unknown: float | None
    h_score: float | None
    per_class_accuracy: dict[str, float]
    counts: dict[str, int]

    def headline(self, kind: str) -> tuple[str, float]:
        """The metric reported for a category-shift kind: accuracy for PDA, else H-score."""
        if kind in ("PDA", "closed") or self.h_score is None:
            return "accuracy", self.accuracy_all
        return "h_score", self.h_score

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(predictions, ground_truth, unknown_label: int) -> MetricSummary:
    pred, truth = _pair(predictions, ground_truth)
    is_unknown = truth == unknown_label
    a_k = float(np.mean(pred[~is_unknown] == truth[~is_unknown])) if (~is_unknown).any() else None
    a_u = float(np.mean(pred[is_unknown] == unknown_label)) if is_unknown.any() else None
    h = harmonic_mean(a_k, a_u) if a_k is not None and a_u is not None else None
    per_class = {
        str(int(c)): float(np.mean(pred[truth == c] == c)) for c in np.unique(truth)
    }
    counts = {
        "samples": int(len(truth)),
        "known_truth": int((~is_unknown).sum()),
        "unknown_truth": int(is_unknown.sum()),
        "predicted_unknown": int((pred == unknown_label).sum()),
    }
    return MetricSummary(accuracy(pred, truth), a_k, a_u, h, per_class, counts)
