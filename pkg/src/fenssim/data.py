"""Datasets, non-IID partitioning and the protocol's train/eval splits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import FLOAT
from .rng import stream


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=FLOAT)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("features and labels disagree on sample count")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)


@dataclass(frozen=True)
class PartitionSpec:
    alpha: float
    num_clients: int
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")


@dataclass
class ClientShard:
    client_id: int
    local_train: Dataset
    agg_train: Dataset
    label_counts: np.ndarray

    @property
    def num_samples(self) -> int:
        return len(self.local_train) + len(self.agg_train)


# ---------------------------------------------------------------------------
# Synthetic data


def class_means(C: int, d: int) -> np.ndarray:
    """Unit vectors, one per class, independent of any seed.

    The first ``2d`` classes use the signed coordinate axes (+e0, +e1, ...,
    -e0, -e1, ...); beyond that, points from a fixed Gaussian draw are
    projected onto the sphere.
    """
    means = np.zeros((C, d), dtype=np.float64)
    for c in range(min(C, 2 * d)):
        means[c, c % d] = 1.0 if c < d else -1.0
    if C > 2 * d:
        extra = np.random.default_rng(0x5EED).standard_normal((C - 2 * d, d))
        means[2 * d :] = extra / np.linalg.norm(extra, axis=1, keepdims=True)
    return means


def gen_synthetic(C: int, d: int, n_per_class: int, separation: float, seed: int) -> Dataset:
    """Isotropic unit-variance Gaussian blobs centred at ``separation * mean_c``."""
    if C < 2 or d < 2 or n_per_class < 1:
        raise ValueError("need C >= 2, d >= 2 and n_per_class >= 1")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = stream(seed, "synthetic")
    centres = separation * class_means(C, d)
    labels = np.repeat(np.arange(C), n_per_class)
    x = centres[labels] + rng.standard_normal((labels.size, d))
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], C)


# ---------------------------------------------------------------------------
# Partitioning


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to ``weights`` summing exactly to ``total``.

    Leftover units go to the largest fractional parts, lower index first.
    """
    w = np.asarray(weights, dtype=np.float64)
    s = w.sum()
    if total == 0:
        return np.zeros(w.size, dtype=np.int64)
    if s <= 0:
        raise ValueError("weights must have a positive sum")
    raw = w / s * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _dirichlet(rng: np.random.Generator, alpha: float, M: int) -> np.ndarray:
    p = rng.dirichlet(np.full(M, alpha))
    if not np.all(np.isfinite(p)) or p.sum() <= 0:
        # underflow at extreme concentrations: all mass on one client
        p = np.zeros(M)
        p[rng.integers(M)] = 1.0
    return p


def dirichlet_indices(labels: np.ndarray, num_classes: int, spec: PartitionSpec, min_size: int = 1):
    """Per-client sample index arrays (sorted ascending).

    For every class the sample indices are shuffled, proportions are drawn
    from Dir_M(alpha) and turned into counts by largest-remainder rounding.
    Clients left with fewer than ``min_size`` samples then receive samples
    from the currently largest client, one at a time.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot partition an empty dataset")
    M = spec.num_clients
    if min_size * M > labels.size:
        raise ValueError(f"{labels.size} samples cannot give {M} clients {min_size} each")
    rng = stream(spec.seed, "partition")
    buckets: list[list[int]] = [[] for _ in range(M)]
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        p = _dirichlet(rng, spec.alpha, M)
        counts = largest_remainder(p, idx.size)
        start = 0
        for i, k in enumerate(counts):
            buckets[i].extend(idx[start : start + k].tolist())
            start += k
    sizes = [len(b) for b in buckets]
    while min(sizes) < min_size:
        needy = sizes.index(min(sizes))
        donor = sizes.index(max(sizes))
        buckets[needy].append(buckets[donor].pop())
        sizes[needy] += 1
        sizes[donor] -= 1
    return [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]


def dirichlet_partition(ds: Dataset, spec: PartitionSpec, min_size: int = 1) -> list[Dataset]:
    return [ds.subset(idx) for idx in dirichlet_indices(ds.labels, ds.num_classes, spec, min_size)]


# ---------------------------------------------------------------------------
# Splits


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_local(shard_data: Dataset, frac: float = 0.9, seed: int = 0, client_id: int = 0):
    """Random ``frac`` / ``1 - frac`` split, stratified by label when every
    present class has at least two samples.  Both parts are non-empty."""
    if not 0 < frac < 1:
        raise ValueError("frac must lie in (0, 1)")
    n = len(shard_data)
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    n1 = min(max(_round_half_up(frac * n), 1), n - 1)
    rng = stream(seed, "split-local", client_id)
    counts = shard_data.label_counts()
    present = np.flatnonzero(counts)
    if counts[present].min() >= 2:
        quota = largest_remainder(counts[present], n1)
        first, second = [], []
        for c, q in zip(present, quota):
            idx = np.flatnonzero(shard_data.labels == c)
            idx = idx[rng.permutation(idx.size)]
            first.append(idx[:q])
            second.append(idx[q:])
        i1, i2 = np.concatenate(first), np.concatenate(second)
        if i2.size == 0 or i1.size == 0:  # cannot happen with 1 <= n1 <= n-1, kept as a guard
            raise AssertionError("stratified split produced an empty part")
    else:
        perm = rng.permutation(n)
        i1, i2 = perm[:n1], perm[n1:]
    return shard_data.subset(np.sort(i1)), shard_data.subset(np.sort(i2))


def split_eval(test: Dataset, seed: int = 0):
    """Deterministic 50-50 split into (validation, test)."""
    n = len(test)
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    perm = stream(seed, "split-eval").permutation(n)
    half = n // 2
    return test.subset(np.sort(perm[:half])), test.subset(np.sort(perm[half:]))


def make_shards(parts: list[Dataset], frac: float = 0.9, seed: int = 0) -> list[ClientShard]:
    shards = []
    for i, part in enumerate(parts):
        d1, d2 = split_local(part, frac, seed, client_id=i)
        shards.append(ClientShard(i, d1, d2, part.label_counts()))
    return shards


# ---------------------------------------------------------------------------
# CSV


class CSVFormatError(ValueError):
    pass


def load_csv(path) -> Dataset:
    """Rows of ``d`` reals followed by an integer label.

    An optional first line ``#classes=C`` fixes the class count; otherwise
    it is ``1 + max(label)``.
    """
    path = Path(path)
    num_classes = None
    rows, labels = [], []
    width = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if lineno == 1 and line.startswith("#"):
                key, _, value = line[1:].partition("=")
                if key.strip() != "classes":
                    raise CSVFormatError(f"line 1: unknown header {line!r}")
                try:
                    num_classes = int(value)
                except ValueError:
                    raise CSVFormatError(f"line 1: bad class count {value!r}") from None
                continue
            cells = line.split(",")
            if len(cells) < 2:
                raise CSVFormatError(f"line {lineno}: need at least one feature and a label")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise CSVFormatError(f"line {lineno}: expected {width} columns, found {len(cells)}")
            try:
                feats = [float(v) for v in cells[:-1]]
            except ValueError:
                raise CSVFormatError(f"line {lineno}: malformed feature value") from None
            try:
                label = int(cells[-1])
            except ValueError:
                raise CSVFormatError(f"line {lineno}: label {cells[-1]!r} is not an integer") from None
            if label < 0:
                raise CSVFormatError(f"line {lineno}: negative label {label}")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise CSVFormatError(f"{path}: no data rows")
    if num_classes is None:
        num_classes = max(labels) + 1
    elif max(labels) >= num_classes:
        raise CSVFormatError(f"label {max(labels)} exceeds header class count {num_classes}")
    return Dataset(np.asarray(rows), np.asarray(labels), num_classes)


def save_csv(ds: Dataset, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#classes={ds.num_classes}\n")
        for x, y in zip(ds.features, ds.labels):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")
