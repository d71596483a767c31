"""Synthetic long-tailed datasets: count profiles, gaussian mixtures, CSV
ingestion, two-view noise augmentation, and deterministic batch iteration.

Every randomized operation is a pure function of its inputs and seed, so
re-running with the same arguments yields bitwise-identical output.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import ClassProfile


@dataclass
class Dataset:
    """Feature/label pairs plus the count profile they were drawn under."""

    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    profile: ClassProfile
    split: str = "train"

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (N, D) with one label per row")

    def __len__(self) -> int:
        return self.features.shape[0]

    def per_class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.profile.num_classes)


@dataclass
class ViewPair:
    """Two stochastic views of the same source instance."""

    view_main: np.ndarray
    view_momentum: np.ndarray


def exponential_profile(
    num_classes: int, n_max: int, imbalance: float
) -> ClassProfile:
    """Counts decaying exponentially from n_max by the given head/tail ratio.

    n_c = round(n_max * imbalance^(-c / (C-1))), round-half-to-even, clamped
    to at least 1, so the head class holds n_max and the tail class about
    n_max / imbalance.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if imbalance <= 1:
        raise ValueError("imbalance must exceed 1")
    if n_max < imbalance:
        raise ValueError("n_max must be at least the imbalance factor")
    c = np.arange(num_classes, dtype=np.float64)
    raw = n_max * imbalance ** (-c / (num_classes - 1))
    counts = np.maximum(np.round(raw).astype(np.int64), 1)
    return ClassProfile(counts)


def pareto_profile(num_classes: int, n_max: int, n_min: int) -> ClassProfile:
    """Power-law counts with both endpoints pinned.

    n_c = round(n_max * (c+1)^(-a)) with the exponent a chosen so the first
    class holds n_max and the last n_min; the tail is clamped to n_min.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if not n_max > n_min >= 1:
        raise ValueError("need n_max > n_min >= 1")
    a = np.log(n_max / n_min) / np.log(num_classes)
    c = np.arange(1, num_classes + 1, dtype=np.float64)
    raw = n_max * c ** (-a)
    counts = np.maximum(np.round(raw).astype(np.int64), n_min)
    return ClassProfile(counts)


def gaussian_mixture(
    profile: ClassProfile,
    dim: int,
    separation: float,
    seed: int,
    test_per_class: int = 100,
) -> tuple[Dataset, Dataset]:
    """Unit-variance gaussian blobs at seed-determined directions.

    Class means are separation times independent random unit directions, so
    separation 0 collapses all classes onto the same distribution. The train
    split follows the profile counts exactly; the test split holds
    test_per_class instances of every class.
    """
    if dim < 2:
        raise ValueError("dim must be at least 2")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    c = profile.num_classes
    directions = rng.standard_normal((c, dim))
    directions /= np.linalg.norm(directions, axis=1)[:, None]
    means = separation * directions

    train_feats, train_labels = [], []
    for k in range(c):
        n = int(profile.counts[k])
        train_feats.append(means[k] + rng.standard_normal((n, dim)))
        train_labels.append(np.full(n, k, dtype=np.int64))
    test_feats, test_labels = [], []
    for k in range(c):
        test_feats.append(means[k] + rng.standard_normal((test_per_class, dim)))
        test_labels.append(np.full(test_per_class, k, dtype=np.int64))

    train = Dataset(
        np.concatenate(train_feats), np.concatenate(train_labels), profile, "train"
    )
    test_profile = ClassProfile(np.full(c, test_per_class, dtype=np.int64))
    test = Dataset(
        np.concatenate(test_feats), np.concatenate(test_labels), test_profile, "test"
    )
    return train, test


def load_csv(path: str | Path, split: str = "train") -> Dataset:
    """Read a header-less `label,f_1,...,f_D` file.

    Every class index from 0 to the maximum label must appear at least once,
    since the derived profile requires positive counts.
    """
    labels, rows = [], []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                label = int(row[0])
                feats = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row: {exc}") from exc
            if label < 0:
                raise ValueError(f"{path}:{lineno}: negative label")
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise ValueError(
                    f"{path}:{lineno}: expected {width} features, got {len(feats)}"
                )
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels_arr)
    profile = ClassProfile(counts)
    return Dataset(np.asarray(rows, dtype=np.float64), labels_arr, profile, split)


def save_csv(dataset: Dataset, path: str | Path) -> None:
    """Write `label,f_1,...,f_D` rows; floats via repr so values round-trip."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for label, feats in zip(dataset.labels, dataset.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in feats])


def subsample(dataset: Dataset, profile: ClassProfile, seed: int) -> Dataset:
    """Per-class subsampling without replacement down to the profile counts."""
    if profile.num_classes > dataset.profile.num_classes:
        raise ValueError("profile has more classes than the dataset")
    rng = np.random.default_rng(seed)
    keep = []
    for k in range(profile.num_classes):
        pool = np.flatnonzero(dataset.labels == k)
        want = int(profile.counts[k])
        if pool.size < want:
            raise ValueError(
                f"class {k} has {pool.size} instances, profile wants {want}"
            )
        chosen = rng.choice(pool, size=want, replace=False)
        keep.append(np.sort(chosen))
    idx = np.concatenate(keep)
    return Dataset(dataset.features[idx], dataset.labels[idx], profile, dataset.split)


def split_csv_dataset(
    full: Dataset, profile: ClassProfile, test_per_class: int, seed: int
) -> tuple[Dataset, Dataset]:
    """Disjoint train/test split of a loaded file.

    Per class, a seeded shuffle assigns the first profile.counts[c] rows to
    the train split and the next test_per_class rows to the balanced test
    split; a class without enough rows for both is an error.
    """
    rng = np.random.default_rng([seed, 303])
    train_idx, test_idx = [], []
    for k in range(profile.num_classes):
        pool = np.flatnonzero(full.labels == k)
        want_train = int(profile.counts[k])
        want = want_train + test_per_class
        if pool.size < want:
            raise ValueError(
                f"class {k} has {pool.size} rows, need {want} for train plus test"
            )
        order = rng.permutation(pool)
        train_idx.append(np.sort(order[:want_train]))
        test_idx.append(np.sort(order[want_train:want]))
    tr = np.concatenate(train_idx)
    te = np.concatenate(test_idx)
    train = Dataset(full.features[tr], full.labels[tr], profile, "train")
    test_profile = ClassProfile(
        np.full(profile.num_classes, test_per_class, dtype=np.int64)
    )
    test = Dataset(full.features[te], full.labels[te], test_profile, "test")
    return train, test


def make_views(
    feature: np.ndarray, noise_sigma: float, rng: np.random.Generator
) -> ViewPair:
    """Two independent gaussian-noise views of one feature vector."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    feature = np.asarray(feature, dtype=np.float64)
    main = feature + noise_sigma * rng.standard_normal(feature.shape)
    momentum = feature + noise_sigma * rng.standard_normal(feature.shape)
    return ViewPair(main, momentum)


def make_view_batch(
    features: np.ndarray, noise_sigma: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Batch form of make_views: one noise draw per view over the whole batch."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    features = np.asarray(features, dtype=np.float64)
    main = features + noise_sigma * rng.standard_normal(features.shape)
    momentum = features + noise_sigma * rng.standard_normal(features.shape)
    return main, momentum


def batch_iterator(
    dataset: Dataset, batch_size: int, seed: int, epoch: int
) -> list[np.ndarray]:
    """Index batches for one epoch: a uniform shuffle keyed by (seed, epoch),
    cut into batch_size chunks with the final partial batch kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng([seed, 101, epoch])
    perm = rng.permutation(len(dataset))
    return [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
