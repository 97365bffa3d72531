"""Seeded Gaussian-mixture data with one live cluster and K attack-type clusters.

Geometry, in feature space of width ``dims``:

* live ~ N(0, live_spread^2 I)
* the fake centroid sits ``gap`` along axis 0
* attack type k is offset from the fake centroid by ``type_radius`` along the
  direction at angle 2*pi*(k-1)/K in the plane of axes 1 and 2, so the attack
  types surround the live cluster; the rare type uses ``rare_factor`` times
  that radius.

A linear probe mostly sees only the small gap along axis 0, while a
nonlinear model can separate the surrounding attack types. Image mode turns
feature j into patch j of a square image, scaled by a fixed unit-norm
texture.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError

LIVE, FAKE = 0, 1
TEXTURE_SEED = 20240917


@dataclass(frozen=True)
class SyntheticSpec:
    dims: int = 16
    attack_types: int = 4
    live_spread: float = 1.0
    type_spreads: tuple[float, ...] = ()  # per attack type; empty -> all 1.0
    gap: float = 1.5
    type_radius: float = 6.0
    rare_type: int | None = None  # defaults to the last type
    rare_factor: float = 1.5
    n_per_type: int = 150
    n_live: int | None = None  # defaults to attack_types * n_per_type
    seed: int = 0
    image_side: int = 16
    patch_side: int = 4

    def __post_init__(self):
        k = self.attack_types
        if k < 2:
            raise ConfigError(f"need at least 2 attack types, got {k}")
        if self.dims < 3:
            raise ConfigError(f"need at least 3 feature dims, got {self.dims}")
        if self.live_spread <= 0 or any(s <= 0 for s in self.spreads):
            raise ConfigError("all spreads must be positive")
        if self.type_spreads and len(self.type_spreads) != k:
            raise ConfigError(f"{len(self.type_spreads)} type spreads given for {k} attack types")
        if not 1 <= self.rare <= k:
            raise ConfigError(f"rare type {self.rare} outside 1..{k}")
        if self.n_per_type < 1 or self.live_count < 1:
            raise ConfigError("sample counts must be positive")

    @property
    def spreads(self) -> tuple[float, ...]:
        return self.type_spreads or (1.0,) * self.attack_types

    @property
    def rare(self) -> int:
        return self.attack_types if self.rare_type is None else self.rare_type

    @property
    def live_count(self) -> int:
        return self.n_live if self.n_live is not None else self.attack_types * self.n_per_type

    def type_means(self) -> np.ndarray:
        """(K + 1, dims) means; row 0 is live."""
        k = self.attack_types
        means = np.zeros((k + 1, self.dims))
        for t in range(1, k + 1):
            angle = 2 * math.pi * (t - 1) / k
            radius = self.type_radius * (self.rare_factor if t == self.rare else 1.0)
            means[t, 0] = self.gap
            means[t, 1] = radius * math.cos(angle)
            means[t, 2] = radius * math.sin(angle)
        return means

    def type_scale(self, attack_type: int) -> float:
        return self.live_spread if attack_type == 0 else self.spreads[attack_type - 1]


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    attack_type: np.ndarray
    spec: SyntheticSpec | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[idx], self.labels[idx], self.attack_type[idx], self.spec)

    def images(self) -> np.ndarray:
        spec = self.spec or SyntheticSpec(dims=self.features.shape[1])
        return render_images(self.features, spec.image_side, spec.patch_side)


def generate(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    means = spec.type_means()
    blocks, types = [], []
    for t in range(spec.attack_types + 1):
        count = spec.live_count if t == 0 else spec.n_per_type
        blocks.append(means[t] + spec.type_scale(t) * rng.standard_normal((count, spec.dims)))
        types.append(np.full(count, t))
    features = np.concatenate(blocks)
    attack_type = np.concatenate(types)
    order = rng.permutation(attack_type.size)
    attack_type = attack_type[order]
    labels = (attack_type > 0).astype(int)
    return Dataset(features[order], labels, attack_type, spec)


def textures(count: int, patch_side: int) -> np.ndarray:
    """Fixed unit-Frobenius-norm patch patterns, one per feature."""
    rng = np.random.default_rng(TEXTURE_SEED)
    tex = rng.standard_normal((count, patch_side, patch_side))
    return tex / np.linalg.norm(tex.reshape(count, -1), axis=1)[:, None, None]


def render_images(features: np.ndarray, image_side: int = 16, patch_side: int = 4) -> np.ndarray:
    """(n, dims) -> (n, 1, side, side); feature j fills patch j (row-major), the rest stay 0."""
    if image_side % patch_side:
        raise ConfigError(f"image side {image_side} not divisible by patch side {patch_side}")
    grid = image_side // patch_side
    n, dims = features.shape
    if dims > grid * grid:
        raise ConfigError(f"{dims} features do not fit in a {grid}x{grid} patch grid")
    patches = np.zeros((n, grid * grid, patch_side, patch_side))
    patches[:, :dims] = features[:, :, None, None] * textures(dims, patch_side)
    img = patches.reshape(n, grid, grid, patch_side, patch_side).transpose(0, 1, 3, 2, 4)
    return img.reshape(n, 1, image_side, image_side)


# ----------------------------------------------------------------- splits


@dataclass
class Split:
    train: Dataset
    dev: Dataset
    test: Dataset
    indices: dict = field(default_factory=dict)


def _partition(ds: Dataset, train_idx, test_idx, dev_fraction, rng) -> Split:
    train_idx = rng.permutation(np.asarray(train_idx, dtype=int))
    n_dev = int(round(dev_fraction * train_idx.size))
    dev_idx, train_idx = np.sort(train_idx[:n_dev]), np.sort(train_idx[n_dev:])
    test_idx = np.sort(np.asarray(test_idx, dtype=int))
    return Split(ds.subset(train_idx), ds.subset(dev_idx), ds.subset(test_idx),
                 {"train": train_idx, "dev": dev_idx, "test": test_idx})


def intra_split(ds: Dataset, test_fraction: float = 0.2, dev_fraction: float = 0.1,
                seed: int = 0) -> Split:
    """All attack types in every split; the test share is drawn per attack type."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for t in np.unique(ds.attack_type):
        idx = rng.permutation(np.flatnonzero(ds.attack_type == t))
        n_test = int(round(test_fraction * idx.size))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    return _partition(ds, train_idx, test_idx, dev_fraction, rng)


def leave_one_type_out(ds: Dataset, held_type: int, test_fraction: float = 0.2,
                       dev_fraction: float = 0.1, seed: int = 0) -> Split:
    """Train/dev never see ``held_type``; test is that type plus held-back live samples."""
    types = set(np.unique(ds.attack_type[ds.attack_type > 0]).tolist())
    if held_type not in types:
        raise DataError(f"held type {held_type} not among attack types {sorted(types)}")
    rng = np.random.default_rng(seed)
    live = rng.permutation(np.flatnonzero(ds.attack_type == 0))
    n_test = int(round(test_fraction * live.size))
    test_idx = np.concatenate([live[:n_test], np.flatnonzero(ds.attack_type == held_type)])
    seen = np.flatnonzero((ds.attack_type > 0) & (ds.attack_type != held_type))
    train_idx = np.concatenate([live[n_test:], seen])
    return _partition(ds, train_idx, test_idx, dev_fraction, rng)


# ----------------------------------------------------------------- batching


def balanced_batches(split: Dataset, batch_size: int, seed: int, epochs: int | None = None):
    """Yield index arrays into ``split``; every batch holds both classes.

    Each class gets a share of every batch proportional to its frequency
    (at least one slot). An epoch lasts until every sample has been emitted
    once; a class that runs out first is padded with re-drawn samples.
    """
    if batch_size < 2 or batch_size % 2:
        raise DataError(f"batch size must be even and >= 2, got {batch_size}")
    live = np.flatnonzero(split.labels == LIVE)
    fake = np.flatnonzero(split.labels == FAKE)
    if live.size == 0 or fake.size == 0:
        raise DataError("split is missing a class; balanced batches need both live and fake")
    n_live = min(max(1, round(batch_size * live.size / len(split))), batch_size - 1)
    n_fake = batch_size - n_live
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = np.random.default_rng([seed, epoch])
        queues = [_Queue(live, rng), _Queue(fake, rng)]
        while not all(q.done for q in queues):
            yield np.concatenate([queues[0].take(n_live), queues[1].take(n_fake)])
        epoch += 1


class _Queue:
    def __init__(self, idx: np.ndarray, rng: np.random.Generator):
        self.idx, self.rng = idx, rng
        self.order = rng.permutation(idx)
        self.pos = 0

    @property
    def done(self) -> bool:
        return self.pos >= self.order.size

    def take(self, k: int) -> np.ndarray:
        fresh = self.order[self.pos:self.pos + k]
        self.pos += fresh.size
        if fresh.size < k:
            fresh = np.concatenate([fresh, self.rng.choice(self.idx, size=k - fresh.size)])
        return fresh


# ----------------------------------------------------------------- csv


def write_csv(ds: Dataset, path, features: np.ndarray | None = None) -> None:
    feats = ds.features if features is None else features
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(feats.shape[1])] + ["label", "attack_type"])
        for row, y, t in zip(feats, ds.labels, ds.attack_type):
            w.writerow([repr(float(v)) for v in row] + [int(y), int(t)])


def read_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-2:] != ["label", "attack_type"]:
        raise DataError(f"{path}: expected trailing columns label, attack_type; got {header[-2:]}")
    width = len(header) - 2
    feats = np.array([[float(v) for v in r[:width]] for r in body]).reshape(len(body), width)
    labels = np.array([int(r[width]) for r in body], dtype=int)
    types = np.array([int(r[width + 1]) for r in body], dtype=int)
    return Dataset(feats, labels, types)


def with_seed(spec: SyntheticSpec, seed: int) -> SyntheticSpec:
    return replace(spec, seed=seed)
