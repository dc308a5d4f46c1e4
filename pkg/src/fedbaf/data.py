"""Datasets, partitioning across clients, and label-shuffling corruption."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ClassMask, ConfigError
from .rng import stream


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ConfigError("features must be N x D with one label per row")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ConfigError("label outside [0, num_classes)")
        if np.isnan(x).any():
            raise ConfigError("NaN in features")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


def concat(parts: list[Dataset]) -> Dataset:
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].num_classes,
    )


def mixture_means(
    num_classes: int, dim: int, seed: int, separation: float = 1.0, offset: float = 0.0
) -> np.ndarray:
    rng = stream(seed, "mixture-means")
    means = separation * rng.standard_normal((num_classes, dim))
    if offset:
        direction = stream(seed, "mixture-offset").standard_normal(dim)
        means = means + offset * direction / np.linalg.norm(direction)
    return means


def gen_gaussian_mixture(
    num_classes: int,
    dim: int,
    n_per_class: int,
    spread: float,
    seed: int,
    *,
    means_seed: int | None = None,
    separation: float = 1.0,
    mean_shift: float = 0.0,
    shift_seed: int = 0,
    offset: float = 0.0,
) -> Dataset:
    """Isotropic Gaussian blobs, one per class.

    Class means come from ``means_seed`` (defaults to ``seed``) so a train
    and a test set can share a distribution while drawing different samples.
    ``mean_shift`` perturbs every mean by a seeded Gaussian offset of that
    scale, giving a related but distinct distribution. ``offset`` moves all
    means by one shared vector of that norm (non-centered features).
    """
    if min(num_classes, dim, n_per_class) < 1 or spread < 0:
        raise ConfigError("gaussian mixture parameters must be positive")
    means = mixture_means(
        num_classes, dim, seed if means_seed is None else means_seed, separation, offset
    )
    if mean_shift:
        means = means + mean_shift * stream(shift_seed, "mixture-shift").standard_normal(means.shape)
    rng = stream(seed, "mixture-samples")
    labels = np.repeat(np.arange(num_classes), n_per_class)
    features = means[labels] + spread * rng.standard_normal((labels.size, dim))
    return Dataset(features, labels, num_classes)


def load_csv(path: str | Path, num_classes: int) -> Dataset:
    """Rows of ``D`` floats followed by an integer label."""
    rows, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ConfigError(f"{path}:{lineno}: expected features and a label")
            try:
                feats = [float(cell) for cell in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: malformed row ({exc})") from None
            if rows and len(feats) != len(rows[0]):
                raise ConfigError(f"{path}:{lineno}: expected {len(rows[0])} features")
            if not 0 <= label < num_classes:
                raise ConfigError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), num_classes)


@dataclass(frozen=True)
class ClientShard:
    train: Dataset
    local_test: Dataset
    mask: ClassMask


@dataclass(frozen=True)
class Partition:
    client_shards: list[ClientShard]
    global_test: Dataset
    mode: str
    dropped: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.client_shards)

    @property
    def sizes(self) -> list[int]:
        return [len(s.train) for s in self.client_shards]

    def summary(self, malicious: set[int] | frozenset[int] = frozenset()) -> dict:
        return {
            "mode": self.mode,
            "dropped_samples": self.dropped,
            "clients": {
                str(k): {
                    "n": len(s.train),
                    "classes": s.mask.classes,
                    "malicious": k in malicious,
                }
                for k, s in enumerate(self.client_shards)
            },
        }


def noniid_classes(client: int, num_classes: int, fraction: float) -> list[int]:
    s = math.ceil(fraction * num_classes - 1e-9)
    return [(client * s + j) % num_classes for j in range(s)]


def partition(
    data: Dataset,
    test: Dataset,
    num_clients: int,
    mode: str = "iid",
    class_fraction: float = 1.0,
    seed: int = 0,
) -> Partition:
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    C = data.num_classes
    rng = stream(seed, "partition")
    by_class = [rng.permutation(np.flatnonzero(data.labels == c)) for c in range(C)]

    if mode == "iid":
        order = np.concatenate(by_class)
        assignment = [order[k::num_clients] for k in range(num_clients)]
        shards = []
        for idx in assignment:
            if idx.size == 0:
                raise ConfigError("more clients than training samples")
            shards.append(ClientShard(data.subset(np.sort(idx)), test, ClassMask.all(C)))
        return Partition(shards, test, mode)

    if mode != "noniid":
        raise ConfigError(f"unknown partition mode {mode!r}")
    s = math.ceil(class_fraction * C - 1e-9)
    if not 1 <= s <= C:
        raise ConfigError("class_fraction * num_classes must be at least 1")
    if num_clients * s < C:
        raise ConfigError(
            f"{num_clients} clients x {s} classes cannot cover {C} classes"
        )
    classes = [noniid_classes(k, C, class_fraction) for k in range(num_clients)]
    holders: dict[int, list[int]] = {c: [] for c in range(C)}
    for k, cls in enumerate(classes):
        for c in cls:
            holders[c].append(k)

    pieces: dict[tuple[int, int], np.ndarray] = {}
    for c in range(C):
        chunks = np.array_split(by_class[c], len(holders[c]))
        for k, chunk in zip(holders[c], chunks):
            pieces[(k, c)] = chunk

    shards, dropped = [], 0
    for k, cls in enumerate(classes):
        per_class = min(pieces[(k, c)].size for c in cls)
        if per_class == 0:
            raise ConfigError(f"client {k} receives no samples for one of its classes")
        idx = np.concatenate([pieces[(k, c)][:per_class] for c in cls])
        dropped += sum(pieces[(k, c)].size for c in cls) - idx.size
        mask = ClassMask.of(cls, C)
        local_test = test.subset(np.flatnonzero(mask.present[test.labels]))
        if len(local_test) == 0:
            raise ConfigError(f"client {k}: global test set has none of classes {cls}")
        shards.append(ClientShard(data.subset(np.sort(idx)), local_test, mask))
    return Partition(shards, test, mode, dropped)


@dataclass(frozen=True)
class AttackPlan:
    zeta: float = 0.0
    lam: float = 1.0
    malicious_ids: frozenset[int] = field(default_factory=frozenset)

    @classmethod
    def build(cls, zeta: float, lam: float, num_clients: int, seed: int) -> "AttackPlan":
        if not 0.0 <= zeta <= 1.0:
            raise ConfigError("zeta must lie in [0, 1]")
        if lam < 1.0:
            raise ConfigError("lambda must be >= 1 for classification")
        count = int(math.floor(zeta * num_clients + 0.5))
        chosen = stream(seed, "malicious").choice(num_clients, size=count, replace=False)
        return cls(zeta, lam, frozenset(int(k) for k in chosen))

    def is_malicious(self, client: int) -> bool:
        return client in self.malicious_ids

    def epochs(self, client: int, base_epochs: int) -> int:
        if base_epochs <= 0:
            return 0
        if not self.is_malicious(client):
            return base_epochs
        return max(1, int(math.floor(self.lam * base_epochs + 0.5)))


def corrupt_labels(data: Dataset, seed: int) -> Dataset:
    """Shuffle the labels (a uniform permutation); features are untouched."""
    if len(data) < 2:
        raise ConfigError("need at least two samples to shuffle labels")
    perm = stream(seed, "corrupt-labels").permutation(len(data))
    return Dataset(data.features, data.labels[perm], data.num_classes)
