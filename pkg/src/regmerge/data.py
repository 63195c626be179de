"""Synthetic classification tasks and the non-iid key-class partitioner.

All randomness flows through numpy's Philox counter-based bit generator so
datasets are regenerable bit-exact from their seed on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Class geometry (blob centers) is derived from this fixed key so every
# domain of a task shares the same underlying class structure; domain shift
# comes only from DomainShift parameters.
CLASS_GEOMETRY_KEY = 0xC1A55
BLOB_SEPARATION = 3.0


def rng_for(seed: int) -> np.random.Generator:
    """The package-wide deterministic generator (Philox, counter-based)."""
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass
class Dataset:
    """A flat labeled dataset: x is (n, d) float64, y is (n,) int labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx])


def concat(datasets: list[Dataset]) -> Dataset:
    return Dataset(np.concatenate([d.x for d in datasets]),
                   np.concatenate([d.y for d in datasets]))


@dataclass
class TaskData:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass(frozen=True)
class DomainShift:
    """Parametric shift applied to a task's samples for one domain."""

    mean_offset: tuple = ()
    rotation: float = 0.0       # radians, applied in the first two input dims
    class_priors: tuple = ()    # label distribution; empty = uniform


@dataclass(frozen=True)
class SyntheticTask:
    generator: str  # gaussian_blobs | rotated_blobs | moon_mixtures
    input_dim: int
    num_classes: int
    domain_shift: DomainShift = field(default_factory=DomainShift)
    sizes: tuple = (1000, 200, 500)  # train, val, test
    seed: int = 0

    def realize(self) -> TaskData:
        """Generate the train/val/test splits (disjoint, bit-reproducible)."""
        rng = rng_for(self.seed)
        n_train, n_val, n_test = self.sizes
        chunks = []
        for n in (n_train, n_val, n_test):
            chunks.append(self._sample(rng, n))
        return TaskData(*chunks)

    def _sample(self, rng: np.random.Generator, n: int) -> Dataset:
        if self.generator in ("gaussian_blobs", "rotated_blobs"):
            x, y = self._sample_blobs(rng, n)
        elif self.generator == "moon_mixtures":
            x, y = self._sample_moons(rng, n)
        else:
            raise ValueError(f"unknown generator: {self.generator!r}")
        x = self._apply_shift(x)
        return Dataset(x, y)

    def _priors(self) -> np.ndarray:
        p = self.domain_shift.class_priors
        if not p:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        p = np.asarray(p, dtype=np.float64)
        if len(p) != self.num_classes or p.min() < 0 or p.sum() <= 0:
            raise ValueError("invalid class_priors")
        return p / p.sum()

    def _class_means(self) -> np.ndarray:
        geom = rng_for(CLASS_GEOMETRY_KEY)
        means = geom.normal(size=(self.num_classes, self.input_dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        return means * BLOB_SEPARATION

    def _sample_blobs(self, rng, n):
        means = self._class_means()
        y = rng.choice(self.num_classes, size=n, p=self._priors())
        x = means[y] + rng.normal(size=(n, self.input_dim))
        return x, y

    def _sample_moons(self, rng, n):
        if self.num_classes != 2:
            raise ValueError("moon_mixtures requires num_classes == 2")
        y = rng.choice(2, size=n, p=self._priors())
        theta = rng.uniform(0.0, np.pi, size=n)
        x = rng.normal(scale=0.2, size=(n, self.input_dim))
        # two interleaving half-circles in the first two dims
        x[:, 0] += np.where(y == 0, np.cos(theta), 1.0 - np.cos(theta))
        x[:, 1] += np.where(y == 0, np.sin(theta), 0.5 - np.sin(theta))
        return x * BLOB_SEPARATION / 2.0, y

    def _apply_shift(self, x: np.ndarray) -> np.ndarray:
        angle = self.domain_shift.rotation
        if angle and self.input_dim >= 2:
            c, s = np.cos(angle), np.sin(angle)
            rot = x[:, :2] @ np.array([[c, s], [-s, c]])
            x = x.copy()
            x[:, :2] = rot
        offset = self.domain_shift.mean_offset
        if offset:
            off = np.zeros(self.input_dim)
            off[:len(offset)] = offset
            x = x + off
        return x


@dataclass(frozen=True)
class PartitionSpec:
    """Key-class construction of two label-skewed partitions."""

    key_class: int | str = "random"
    key_fraction: float = 0.8
    partition_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.key_fraction < 1.0:
            raise ValueError("key_fraction must be in (0, 1)")
        if self.partition_size < 1:
            raise ValueError("partition_size must be positive")


def make_noniid_partitions(dataset: Dataset, spec: PartitionSpec) -> tuple[Dataset, Dataset]:
    """Split one dataset into two partitions with skewed label distributions.

    One partition starts with key_fraction of the key class; the rest of the
    data forms the other. Non-key examples are then moved uniformly at
    random (without replacement) until sizes equalize, and both partitions
    are subsampled to partition_size.
    """
    classes = np.unique(dataset.y)
    if len(dataset) < 2 * spec.partition_size:
        raise ValueError("dataset too small for the requested partition size")
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    rng = rng_for(spec.seed)
    if spec.key_class == "random":
        key = int(rng.choice(classes))
    else:
        key = int(spec.key_class)
        if key not in classes:
            raise ValueError(f"key class {key} not present in dataset")

    key_idx = np.flatnonzero(dataset.y == key)
    key_idx = rng.permutation(key_idx)
    n_key = int(round(spec.key_fraction * len(key_idx)))
    part1 = list(key_idx[:n_key])
    part2 = list(key_idx[n_key:]) + list(np.flatnonzero(dataset.y != key))

    # rebalance by moving non-key examples from the larger partition,
    # drawn uniformly without replacement
    if abs(len(part1) - len(part2)) > 1:
        src, dst = (part1, part2) if len(part1) > len(part2) else (part2, part1)
        movable = np.asarray([i for i in src if dataset.y[i] != key])
        n_move = min((len(src) - len(dst)) // 2, len(movable))
        picked = set(movable[rng.choice(len(movable), size=n_move,
                                        replace=False)].tolist())
        src[:] = [i for i in src if i not in picked]
        dst.extend(sorted(picked))

    out = []
    for part in (part1, part2):
        part = np.asarray(part)
        if len(part) < spec.partition_size:
            raise ValueError("partition smaller than partition_size after balancing")
        sel = rng.choice(len(part), size=spec.partition_size, replace=False)
        out.append(dataset.subset(np.sort(part[sel])))
    return out[0], out[1]


def dataset_to_json_dict(dataset: Dataset) -> dict:
    return {"x": dataset.x.tolist(), "y": dataset.y.tolist()}


def dataset_from_json_dict(obj: dict) -> Dataset:
    return Dataset(np.asarray(obj["x"], dtype=np.float64),
                   np.asarray(obj["y"], dtype=np.int64))
