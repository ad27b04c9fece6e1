"""Per-class feature prototypes: frozen source means or running target means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SOURCE = "P"
RUNNING = "F"


@dataclass
class PrototypeBank:
    mode: str
    sums: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if self.mode not in (SOURCE, RUNNING):
            raise ValueError(f"unknown prototype mode {self.mode!r}")
        if self.sums.ndim != 2 or self.counts.shape != (self.sums.shape[0],):
            raise ValueError("sums must be (classes, feature_dim) and counts (classes,)")

    @property
    def num_classes(self) -> int:
        return self.sums.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.sums.shape[1]

    @classmethod
    def empty(cls, num_classes: int, feature_dim: int) -> "PrototypeBank":
        return cls(RUNNING, np.zeros((num_classes, feature_dim)), np.zeros(num_classes, dtype=np.int64))

    def get(self, c: int) -> np.ndarray | None:
        if not 0 <= c < self.num_classes:
            raise IndexError(f"class {c} is not a known class (0..{self.num_classes - 1})")
        if self.counts[c] == 0:
            return None
        return self.sums[c] / self.counts[c]

    def present(self) -> np.ndarray:
        return self.counts > 0

    def centroids(self) -> np.ndarray:
        """Class means; rows of absent classes are NaN."""
        out = np.full_like(self.sums, np.nan)
        ok = self.present()
        out[ok] = self.sums[ok] / self.counts[ok, None]
        return out

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.mode, self.sums.copy(), self.counts.copy())


def compute_source_prototypes(features: np.ndarray, labels: np.ndarray, num_classes: int) -> PrototypeBank:
    """Class-wise means of source features; every class must have samples."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes).astype(np.int64)
    if len(counts) > num_classes:
        raise ValueError("labels exceed the number of classes")
    missing = np.flatnonzero(counts == 0)
    if len(missing):
        raise ValueError(f"no source samples for class(es) {missing.tolist()}")
    sums = np.zeros((num_classes, features.shape[1]))
    np.add.at(sums, labels, features)
    return PrototypeBank(SOURCE, sums, counts)


def update_running_prototypes(bank: PrototypeBank, features: np.ndarray, pseudo_labels: np.ndarray) -> PrototypeBank:
    """Add features of known-labeled rows to their class sums (in place)."""
    if bank.mode != RUNNING:
        raise ValueError("source prototypes are frozen")
    pseudo_labels = np.asarray(pseudo_labels)
    if len(features) != len(pseudo_labels):
        raise ValueError(f"{len(features)} feature rows but {len(pseudo_labels)} pseudo-labels")
    known = (pseudo_labels >= 0) & (pseudo_labels < bank.num_classes)
    if known.any():
        np.add.at(bank.sums, pseudo_labels[known], features[known])
        bank.counts += np.bincount(pseudo_labels[known], minlength=bank.num_classes)
    return bank


def bank_arrays(bank: PrototypeBank) -> dict[str, np.ndarray]:
    return {"prototype_sums": bank.sums, "prototype_counts": bank.counts, "prototype_mode": np.array([ord(bank.mode)])}


def bank_from_arrays(arrays: dict[str, np.ndarray]) -> PrototypeBank:
    mode = chr(int(arrays["prototype_mode"][0]))
    return PrototypeBank(mode, arrays["prototype_sums"].copy(), arrays["prototype_counts"].astype(np.int64))
