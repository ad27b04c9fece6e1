"""Normalized entropy and dual-threshold pseudo-labeling.

Pseudo-labels are integer codes: ``0..K-1`` for a known class, ``K`` for
unknown (K = number of source classes) and :data:`UNCERTAIN` for samples
left out of adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import LOG_CLAMP

UNCERTAIN = -1


@dataclass(frozen=True)
class PseudoThresholds:
    delta_l: float = 0.25
    delta_u: float = 0.75

    def __post_init__(self):
        if not (0.0 <= self.delta_l <= 1.0 and 0.0 <= self.delta_u <= 1.0):
            raise ValueError("pseudo-label thresholds must lie in [0, 1]")
        if not self.delta_l < self.delta_u:
            raise ValueError(f"delta_l ({self.delta_l}) must be < delta_u ({self.delta_u})")


def normalized_entropy(p) -> np.ndarray | float:
    """Shannon entropy divided by log(K), along the last axis.

    Terms with p == 0 contribute 0 and a uniform vector gives exactly 1.
    Returns a float for a single vector.
    """
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    if k < 2:
        raise ValueError("normalized entropy needs at least 2 classes")
    plogp = np.where(p > 0, p * np.log(np.maximum(p, LOG_CLAMP)), 0.0)
    ent = -plogp.sum(axis=-1) / np.log(k)
    # Round-off can push exact extremes a hair off 0 or 1.
    ent = np.clip(ent, 0.0, 1.0)
    ent = np.where(np.all(p == p[..., :1], axis=-1), 1.0, ent) + 0.0  # + 0.0 drops a -0.0
    return float(ent) if ent.ndim == 0 else ent


def assign_pseudo_labels(teacher_probs: np.ndarray, thresholds: PseudoThresholds) -> np.ndarray:
    """Known(argmax) if I <= delta_l, unknown if I >= delta_u, else uncertain."""
    probs = np.atleast_2d(np.asarray(teacher_probs, dtype=np.float64))
    k = probs.shape[1]
    ent = np.atleast_1d(normalized_entropy(probs))
    labels = np.full(len(probs), UNCERTAIN, dtype=np.int64)
    labels[ent >= thresholds.delta_u] = k
    known = ent <= thresholds.delta_l
    labels[known] = np.argmax(probs[known], axis=1)
    return labels


def tag_counts(labels: np.ndarray, num_known: int) -> dict[str, int]:
    labels = np.asarray(labels)
    return {
        "known": int(((labels >= 0) & (labels < num_known)).sum()),
        "unknown": int((labels == num_known).sum()),
        "uncertain": int((labels == UNCERTAIN).sum()),
    }
