"""Synthetic blob data, a CSV loader, and client partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .fl_core import Dataset


@dataclass(frozen=True)
class BlobSpec:
    n_classes: int = 4
    n_features: int = 8
    center_scale: float = 2.0
    noise: float = 1.0


def blob_centers(spec: BlobSpec, rng: np.random.Generator) -> np.ndarray:
    """Class centers at ``center_scale`` along distinct axes, then randomly rotated.

    Pairwise center distances are all ``center_scale * sqrt(2)``, so task
    difficulty depends on ``center_scale / noise`` and not on the seed.
    """
    if spec.n_classes > spec.n_features:
        raise InvalidInputError("n_features must be at least n_classes")
    q, r = np.linalg.qr(rng.normal(size=(spec.n_features, spec.n_features)))
    rotation = q * np.sign(np.diag(r))
    centers = np.zeros((spec.n_classes, spec.n_features))
    centers[np.arange(spec.n_classes), np.arange(spec.n_classes)] = spec.center_scale
    return centers @ rotation


def make_blobs(n: int, spec: BlobSpec, rng: np.random.Generator) -> Dataset:
    """Balanced Gaussian blobs with isotropic ``noise`` around :func:`blob_centers`."""
    if n <= 0:
        raise InvalidInputError("need at least one example")
    centers = blob_centers(spec, rng)
    labels = np.arange(n) % spec.n_classes
    rng.shuffle(labels)
    features = centers[labels] + rng.normal(0.0, spec.noise, size=(n, spec.n_features))
    return Dataset(features, labels)


def load_csv(path: str | Path) -> Dataset:
    """Header row required; last column is the integer class label."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty CSV file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if len(header) < 2:
        raise InvalidInputError(f"{path}: need at least one feature column and a label column")
    features, labels = [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise InvalidInputError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            features.append([float(c) for c in row[:-1]])
            label = float(row[-1])
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
        if label != int(label) or label < 0:
            raise InvalidInputError(f"{path}:{lineno}: label {row[-1]!r} is not a class index")
        labels.append(int(label))
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")
    return Dataset(np.array(features), np.array(labels))


@dataclass(frozen=True)
class Partition:
    clients: list[Dataset]
    holdout: Dataset


def draw_client_sizes(k: int, lo: int, hi: int, rng: np.random.Generator) -> list[int]:
    """Uniform integer sizes in [lo, hi]; min and max are forced to differ when lo < hi."""
    if k < 1 or lo < 1 or hi < lo:
        raise InvalidInputError(f"bad client size range [{lo}, {hi}] for {k} clients")
    sizes = rng.integers(lo, hi + 1, size=k)
    if k >= 2 and lo < hi and sizes.min() == sizes.max():
        sizes[0] = lo if sizes[0] != lo else hi
    return [int(s) for s in sizes]


def partition(
    pool: Dataset,
    sizes: list[int],
    holdout_fraction: float,
    rng: np.random.Generator,
    label_skew: float = 0.0,
) -> Partition:
    """Split ``pool`` into a server holdout plus disjoint client shards.

    With ``label_skew`` > 0, client ``k`` draws that fraction of its shard from
    class ``k mod C`` (as far as the class has examples left) and the remainder
    from the mixed pool.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise InvalidInputError("holdout_fraction must lie strictly between 0 and 1")
    if not 0.0 <= label_skew <= 1.0:
        raise InvalidInputError("label_skew must lie in [0, 1]")
    order = rng.permutation(pool.size)
    n_hold = max(1, int(round(pool.size * holdout_fraction)))
    holdout = pool.subset(np.sort(order[:n_hold]))
    remaining = list(order[n_hold:])
    if sum(sizes) > len(remaining):
        raise InvalidInputError(
            f"client shards need {sum(sizes)} examples but only {len(remaining)} remain after holdout"
        )

    n_classes = int(pool.labels.max()) + 1
    by_class: dict[int, list[int]] = {c: [] for c in range(n_classes)}
    for idx in remaining:
        by_class[int(pool.labels[idx])].append(int(idx))
    taken: set[int] = set()
    shards = []
    for k, size in enumerate(sizes):
        picked: list[int] = []
        if label_skew > 0:
            bucket = by_class[k % n_classes]
            want = int(round(size * label_skew))
            while bucket and len(picked) < want:
                idx = bucket.pop()
                if idx not in taken:
                    picked.append(idx)
                    taken.add(idx)
        while len(picked) < size:
            idx = int(remaining.pop())
            if idx not in taken:
                picked.append(idx)
                taken.add(idx)
        shards.append(pool.subset(np.array(sorted(picked))))
    return Partition(shards, holdout)


def pool_size_for(sizes: list[int], holdout_fraction: float) -> int:
    return int(math.ceil(sum(sizes) / (1.0 - holdout_fraction))) + 1
