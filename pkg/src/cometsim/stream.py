"""Synthetic source data and online target streams under domain and category shift."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import ClassSplit, ConfigError, DataConfig, DomainTransform, ScenarioConfig

# Sub-stream tags for np.random.default_rng([seed, tag, ...]).
_SOURCE, _TARGET, _GEOMETRY, _DOMAIN = 11, 12, 13, 14


class StreamOrderError(RuntimeError):
    """Raised on an attempt to revisit or skip ahead in a target stream."""


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, index) -> "Dataset":
        return Dataset(self.x[index], self.y[index])


def class_means(split: ClassSplit, data: DataConfig) -> np.ndarray:
    """Class centres for every global class id.

    Source classes sit at pairwise distance exactly ``data.separation``: scaled
    vertices of a randomly oriented orthonormal frame when the input space has
    room, otherwise equally spaced points on a circle. With
    ``data.unknown_mix = m > 0`` each target-private class is centred on the
    mean of ``m`` randomly chosen source centres, i.e. in the region between
    known clusters; with ``m = 0`` it gets a vertex of its own like the
    source classes.
    """
    rng = np.random.default_rng([data.geometry_seed, _GEOMETRY])
    mix = min(data.unknown_mix, split.num_source)
    n_vertices = split.num_source if mix else split.num_total
    d = data.input_dim
    if d >= n_vertices:
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        vertices = (data.separation / np.sqrt(2.0)) * q[:, :n_vertices].T
    elif d < 2:
        vertices = data.separation * np.arange(n_vertices, dtype=np.float64)[:, None]
    else:
        angles = 2 * np.pi * np.arange(n_vertices) / n_vertices
        radius = data.separation / (2 * np.sin(np.pi / n_vertices))
        vertices = np.zeros((n_vertices, d))
        vertices[:, 0] = radius * np.cos(angles)
        vertices[:, 1] = radius * np.sin(angles)
    if not mix:
        return vertices
    means = np.zeros((split.num_total, d))
    means[: split.num_source] = vertices
    for c in range(split.num_source, split.num_total):
        members = rng.choice(split.num_source, size=mix, replace=False)
        means[c] = vertices[members].mean(axis=0)
    return means


def rotation_matrix(dim: int, degrees: float, seed: int) -> np.ndarray:
    """Rotate each consecutive coordinate pair of a seeded orthonormal basis by ``degrees``."""
    if dim == 1 or degrees == 0:
        return np.eye(dim)
    theta = np.deg2rad(degrees)
    block = np.eye(dim)
    c, s = np.cos(theta), np.sin(theta)
    for k in range(0, dim - 1, 2):
        block[k : k + 2, k : k + 2] = [[c, -s], [s, c]]
    if dim == 2:
        return block
    q, _ = np.linalg.qr(np.random.default_rng([seed, _DOMAIN]).normal(size=(dim, dim)))
    return q @ block @ q.T


def translation_direction(dim: int, seed: int) -> np.ndarray:
    v = np.random.default_rng([seed, _DOMAIN, 1]).normal(size=dim)
    return v / np.linalg.norm(v)


def apply_domain(x: np.ndarray, transform: DomainTransform, data: DataConfig, rng: np.random.Generator) -> np.ndarray:
    if transform.is_identity:
        return x
    rot = rotation_matrix(data.input_dim, transform.rotation_deg, data.geometry_seed)
    shift = transform.translation * data.sigma * translation_direction(data.input_dim, data.geometry_seed)
    out = transform.scale * (x @ rot.T) + shift
    if transform.noise > 0:
        out = out + rng.normal(scale=transform.noise * data.sigma, size=x.shape)
    return out


def generate_source_dataset(scenario: ScenarioConfig, seed: int) -> Dataset:
    """Balanced Gaussian clusters for every source class, no domain shift."""
    split, data = scenario.split, scenario.data
    if split.num_source < 2:
        raise ConfigError("at least 2 source classes are required")
    means = class_means(split, data)
    rng = np.random.default_rng([seed, _SOURCE])
    n = data.source_per_class
    y = np.repeat(np.arange(split.num_source), n)
    x = means[y] + rng.normal(scale=data.sigma, size=(len(y), data.input_dim))
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order])


@dataclass(frozen=True)
class TargetBatch:
    """Inputs of one target batch. Labels are deliberately not part of this type."""

    index: int
    x: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


class GroundTruth:
    """Evaluation-side access to target labels, released only for consumed batches."""

    def __init__(self, stream: "TargetStream"):
        self._stream = stream

    @property
    def unknown_label(self) -> int:
        return self._stream.num_known

    def labels(self, index: int) -> np.ndarray:
        if index >= self._stream.consumed:
            raise StreamOrderError(f"labels of batch {index} requested before the batch was delivered")
        return self._stream._labels[index].copy()


class TargetStream:
    """Strictly sequential batch source: every batch is delivered exactly once."""

    def __init__(self, batches: list[np.ndarray], labels: list[np.ndarray], num_known: int):
        self._batches = batches
        self._labels = labels
        self.num_known = num_known
        self.consumed = 0
        self.ground_truth = GroundTruth(self)

    def __len__(self) -> int:
        return len(self._batches)

    def next_batch(self) -> TargetBatch:
        if self.consumed >= len(self._batches):
            raise StopIteration
        t = self.consumed
        x = self._batches[t]
        self._batches[t] = None  # type: ignore[call-overload]
        self.consumed += 1
        x.setflags(write=False)
        return TargetBatch(t, x)

    def __iter__(self) -> Iterator[TargetBatch]:
        if self.consumed:
            raise StreamOrderError("stream iteration already started; batches cannot be replayed")
        while self.consumed < len(self._batches):
            yield self.next_batch()

    def truncated(self, length: int) -> "TargetStream":
        """A fresh, unconsumed stream holding only the first ``length`` batches."""
        if self.consumed:
            raise StreamOrderError("cannot truncate a stream that has started delivering")
        return TargetStream(
            [b.copy() for b in self._batches[:length]],
            [l.copy() for l in self._labels[:length]],
            self.num_known,
        )


def target_samples(scenario: ScenarioConfig, seed: int, n: int) -> Dataset:
    """``n`` i.i.d. target samples with evaluation labels (unknown = |Y_s|)."""
    split, data = scenario.split, scenario.data
    classes = np.asarray(split.target_classes)
    if len(classes) == 0:
        raise ConfigError("target label space is empty")
    means = class_means(split, data)
    rng = np.random.default_rng([seed, _TARGET])
    g = classes[rng.integers(len(classes), size=n)]
    clean = means[g] + rng.normal(scale=data.sigma, size=(n, data.input_dim))
    x = apply_domain(clean, scenario.domain, data, rng)
    y = np.where(g < split.num_source, g, split.num_source)
    return Dataset(x, y)


def generate_target_stream(scenario: ScenarioConfig, seed: int) -> TargetStream:
    total = scenario.stream.num_samples
    nb = scenario.hyper.batch_size
    ds = target_samples(scenario, seed, total)
    bounds = list(range(0, total, nb)) + [total]
    xs = [ds.x[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    ys = [ds.y[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    return TargetStream(xs, ys, scenario.split.num_source)


def augment(x: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Input-space Gaussian jitter."""
    if sigma == 0:
        return np.array(x, dtype=np.float64, copy=True)
    return x + rng.normal(scale=sigma, size=np.shape(x))


def write_dataset_csv(path, dataset: Dataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{k}" for k in range(dataset.x.shape[1])] + ["label"])
        for row, label in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
