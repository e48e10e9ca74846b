"""Long-tailed dataset construction, shot splits, augmentation and resampling.

Every generator takes an explicit seed (or a ``numpy.random.Generator``) and
is a pure function of its inputs, so repeated calls are bitwise identical.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed datasets or impossible construction requests."""


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if features.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise DatasetError("labels must have one entry per feature row")
        if counts.ndim != 1 or counts.size < 1:
            raise DatasetError("counts must be a non-empty vector")
        if labels.size and (labels.min() < 0 or labels.max() >= counts.size):
            raise DatasetError("labels out of range [0, C)")
        if not np.array_equal(np.bincount(labels, minlength=counts.size), counts):
            raise DatasetError("counts do not match label histogram")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "counts", counts)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.counts.size

    def take(self, index) -> "LabeledDataset":
        """Row subset; counts are recomputed over the same label space."""
        index = np.asarray(index, dtype=np.int64)
        labels = self.labels[index]
        return LabeledDataset(
            self.features[index], labels, np.bincount(labels, minlength=self.num_classes)
        )


@dataclass(frozen=True)
class ImbalanceProfile:
    num_classes: int
    n_max: int
    beta: float

    def __post_init__(self):
        if self.num_classes < 2:
            raise DatasetError("an imbalance profile needs at least 2 classes")
        if self.n_max < 1:
            raise DatasetError("n_max must be >= 1")
        if not self.beta >= 1:
            raise DatasetError("imbalance factor beta must be >= 1")


class Shot(enum.Enum):
    MANY = "Many"
    MEDIUM = "Medium"
    FEW = "Few"


@dataclass(frozen=True)
class ShotSplit:
    assignment: tuple
    many_threshold: int = 100
    few_threshold: int = 20

    def classes(self, shot: Shot) -> np.ndarray:
        return np.array([j for j, s in enumerate(self.assignment) if s is shot], dtype=np.int64)

    def group_of(self, labels) -> np.ndarray:
        """Map class ids to their shot names (object array of str)."""
        names = np.array([s.value for s in self.assignment], dtype=object)
        return names[np.asarray(labels, dtype=np.int64)]


@dataclass(frozen=True)
class AugmentPolicy:
    kind: str = "weak"
    jitter_sigma: float = 0.0
    dropout_prob: float = 0.0
    scale_range: tuple = field(default=(1.0, 1.0))
    op_count: int = 1

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        lo, hi = self.scale_range
        if lo > hi:
            raise ValueError("scale_range must be an ordered interval")
        if self.op_count < 1:
            raise ValueError("op_count must be >= 1")
        if self.kind == "weak" and (self.dropout_prob != 0 or tuple(self.scale_range) != (1.0, 1.0)):
            raise ValueError("weak policy takes no dropout and no rescaling")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))

    @classmethod
    def weak(cls, jitter_sigma: float = 0.0) -> "AugmentPolicy":
        return cls("weak", jitter_sigma)

    @classmethod
    def strong(cls, jitter_sigma=0.0, dropout_prob=0.0, scale_range=(1.0, 1.0), op_count=1):
        return cls("strong", jitter_sigma, dropout_prob, tuple(scale_range), op_count)


def exp_longtail_counts(profile: ImbalanceProfile) -> np.ndarray:
    """Per-class counts ``round(n_max * beta**(-j/(C-1)))``, head class first."""
    C = profile.num_classes
    j = np.arange(C, dtype=np.float64)
    counts = np.rint(profile.n_max * profile.beta ** (-j / (C - 1))).astype(np.int64)
    if counts.min() < 1:
        raise DatasetError(
            f"beta={profile.beta} with n_max={profile.n_max} rounds a class count to 0"
        )
    return counts


def subsample_longtail(balanced: LabeledDataset, counts, seed) -> LabeledDataset:
    """Draw exactly ``counts[j]`` rows of class j, without replacement."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size != balanced.num_classes:
        raise DatasetError("counts length differs from the dataset's class count")
    short = np.flatnonzero(counts > balanced.counts)
    if short.size:
        j = int(short[0])
        raise DatasetError(
            f"class {j} has {balanced.counts[j]} samples, {counts[j]} requested"
        )
    rng = np.random.default_rng(seed)
    picked = []
    for j in range(counts.size):
        rows = np.flatnonzero(balanced.labels == j)
        picked.append(np.sort(rng.choice(rows, size=counts[j], replace=False)))
    return balanced.take(np.concatenate(picked))


def class_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Deterministic mean layout with neighbouring means ``separation`` apart.

    With ``dim >= C`` the means are scaled basis vectors, so every pair sits at
    exactly ``separation``. Otherwise they are placed on a regular polygon in
    the first two coordinates with adjacent vertices ``separation`` apart.
    """
    means = np.zeros((num_classes, dim))
    if dim >= num_classes:
        means[np.arange(num_classes), np.arange(num_classes)] = separation / math.sqrt(2.0)
    else:
        radius = separation / (2.0 * math.sin(math.pi / num_classes))
        theta = 2.0 * math.pi * np.arange(num_classes) / num_classes
        means[:, 0] = radius * np.cos(theta)
        means[:, 1] = radius * np.sin(theta)
    return means


def synth_gaussians(num_classes, dim, counts, separation, seed) -> LabeledDataset:
    """Isotropic unit-variance Gaussian classes with exact per-class counts."""
    if num_classes < 2 or dim < 2:
        raise DatasetError("need num_classes >= 2 and dim >= 2")
    if not separation > 0:
        raise DatasetError("separation must be positive")
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (num_classes,) or counts.min() < 0:
        raise DatasetError("counts must be a non-negative vector of length num_classes")
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, dim, separation)
    labels = np.repeat(np.arange(num_classes), counts)
    features = means[labels] + rng.standard_normal((labels.size, dim))
    return LabeledDataset(features, labels, counts)


def shot_partition(counts, many_threshold: int = 100, few_threshold: int = 20) -> ShotSplit:
    if few_threshold > many_threshold:
        raise ValueError("few_threshold must not exceed many_threshold")
    assignment = []
    for n in np.asarray(counts).tolist():
        if n > many_threshold:
            assignment.append(Shot.MANY)
        elif n < few_threshold:
            assignment.append(Shot.FEW)
        else:
            assignment.append(Shot.MEDIUM)
    return ShotSplit(tuple(assignment), many_threshold, few_threshold)


def augment_batch(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Augment every row of ``x`` independently, drawing from ``rng``.

    Weak: additive Gaussian jitter. Strong: ``op_count`` rounds of jitter
    followed by coordinate dropout, then one per-row global scale.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    if policy.kind == "weak":
        if policy.jitter_sigma > 0:
            x += policy.jitter_sigma * rng.standard_normal(x.shape)
        return x
    for _ in range(policy.op_count):
        if policy.jitter_sigma > 0:
            x += policy.jitter_sigma * rng.standard_normal(x.shape)
        if policy.dropout_prob > 0:
            x[rng.random(x.shape) < policy.dropout_prob] = 0.0
    lo, hi = policy.scale_range
    if hi > lo:
        x *= rng.uniform(lo, hi, size=(x.shape[0], 1))
    elif lo != 1.0:
        x *= lo
    return x


def augment(x, policy: AugmentPolicy, seed) -> np.ndarray:
    """Single-vector augmentation; deterministic per ``(x, seed)``."""
    x = np.asarray(x, dtype=np.float64)
    return augment_batch(x[None, :], policy, np.random.default_rng(seed))[0]


def bootstrap_resample(dataset: LabeledDataset, seed) -> LabeledDataset:
    """Per-class resampling with replacement; the count vector is preserved."""
    if dataset.n == 0:
        raise DatasetError("cannot resample an empty dataset")
    rng = np.random.default_rng(seed)
    picked = []
    for j in range(dataset.num_classes):
        rows = np.flatnonzero(dataset.labels == j)
        if rows.size:
            picked.append(np.sort(rng.choice(rows, size=rows.size, replace=True)))
    return dataset.take(np.concatenate(picked))


def write_dataset_csv(dataset: LabeledDataset, path) -> None:
    lines = [f"{dataset.n},{dataset.dim},{dataset.num_classes}"]
    lines.append(",".join(str(int(c)) for c in dataset.counts))
    for row, label in zip(dataset.features, dataset.labels):
        lines.append(",".join(format(v, ".17g") for v in row) + f",{int(label)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset_csv(path) -> LabeledDataset:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if len(text) < 2:
        raise DatasetError(f"{path}: missing header lines")
    try:
        n, d, C = (int(v) for v in text[0].split(","))
        counts = np.array([int(v) for v in text[1].split(",")], dtype=np.int64)
    except ValueError as exc:
        raise DatasetError(f"{path}: bad header: {exc}") from None
    if counts.size != C:
        raise DatasetError(f"{path}: header says C={C} but {counts.size} counts given")
    rows = [line for line in text[2:] if line.strip()]
    if len(rows) != n:
        raise DatasetError(f"{path}: header says n={n} but {len(rows)} rows found")
    features = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    for i, line in enumerate(rows):
        parts = line.split(",")
        if len(parts) != d + 1:
            raise DatasetError(f"{path}: row {i} has {len(parts)} fields, expected {d + 1}")
        features[i] = [float(v) for v in parts[:d]]
        labels[i] = int(parts[d])
    return LabeledDataset(features, labels, counts)
