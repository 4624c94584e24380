"""Datasets: FIDB binary I/O, Dirichlet label-skew partitioning, toy tasks
and seed-image pools for synthesis initialization.

FIDB layout (little-endian): magic "FIDB" | u32 version=1 | u32 N | u32 C
| u32 H | u32 W | u32 K | N x u8 labels | N*C*H*W x f32 pixels row-major.
Pixels live in [0,1]. In memory everything is float64, quantized through
f32 so that save/load round-trips are exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError

_MAGIC = b"FIDB"
_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N,C,H,W] float64 in [0,1]
    labels: np.ndarray  # [N] int64
    n_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise InputError(f"images must be [N,C,H,W] with N >= 1, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise InputError("labels length must match image count")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise InputError(f"label out of range [0,{self.n_classes})")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise InputError(f"pixels must lie in [0,1], got [{lo},{hi}]")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class ShardSet:
    shards: tuple  # per-client int64 index arrays into the parent Dataset
    alpha: float
    seed: int


@dataclass(frozen=True)
class SeedPool:
    images: np.ndarray  # [M,C,H,W] in [0,1]
    provenance: str  # "random" | "file"


@dataclass(frozen=True)
class ToySpec:
    """Seeded Gaussian-blob class prototypes rendered onto C x H x W grids."""

    n_classes: int
    per_class: object  # int, or per-class tuple of counts
    shape: tuple = (1, 8, 8)
    sigma: float = 0.0
    seed: int = 0


def _quantize(pixels: np.ndarray) -> np.ndarray:
    # through f32 so the FIDB round trip is bit-exact
    return pixels.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# FIDB I/O


def save_dataset(dataset: Dataset, path) -> None:
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIIIII", _VERSION, n, c, h, w, dataset.n_classes))
        f.write(dataset.labels.astype("<u1").tobytes())
        f.write(dataset.images.astype("<f4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r} at offset 0")
    if len(raw) < 28:
        raise FormatError(f"truncated header at offset {len(raw)}")
    version, n, c, h, w, k = struct.unpack_from("<IIIIII", raw, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    need = 28 + n + n * c * h * w * 4
    if len(raw) != need:
        raise FormatError(f"expected {need} bytes, file truncated at offset {len(raw)}")
    labels = np.frombuffer(raw, dtype="<u1", count=n, offset=28).astype(np.int64)
    if labels.size and labels.max() >= k:
        raise InputError(f"label {labels.max()} >= n_classes {k}")
    pixels = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=28 + n)
    images = pixels.astype(np.float64).reshape(n, c, h, w)
    return Dataset(images, labels, int(k))


# ---------------------------------------------------------------------------
# Partitioning


def dirichlet_partition(dataset: Dataset, n_clients: int, alpha: float, seed: int) -> ShardSet:
    """Per-class Dirichlet allocation with largest-remainder rounding.

    Empty shards are repaired by moving one sample from the largest shard,
    so every shard is non-empty and downstream local training is viable.
    """
    if alpha <= 0.0:
        raise InputError(f"alpha must be positive, got {alpha}")
    if n_clients < 1:
        raise InputError(f"n_clients must be >= 1, got {n_clients}")
    if n_clients > len(dataset):
        raise InputError(f"n_clients {n_clients} > dataset size {len(dataset)}")
    rng = np.random.default_rng(seed)
    shards = [[] for _ in range(n_clients)]
    for k in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_clients, alpha))
        counts = _largest_remainder(props, idx.size)
        stop = np.cumsum(counts)
        start = stop - counts
        for c in range(n_clients):
            shards[c].extend(idx[start[c]:stop[c]])
    # repair: every shard must end up non-empty
    while any(len(s) == 0 for s in shards):
        donor = max(range(n_clients), key=lambda c: len(shards[c]))
        taker = next(c for c in range(n_clients) if len(shards[c]) == 0)
        shards[taker].append(shards[donor].pop())
    out = tuple(np.sort(np.asarray(s, dtype=np.int64)) for s in shards)
    return ShardSet(out, alpha, seed)


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    raw = props * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    # ties broken toward the lowest client index (stable sort)
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


# ---------------------------------------------------------------------------
# Toy task


def make_toy_task(spec: ToySpec) -> Dataset:
    """Gaussian-blob classification task, deterministic per seed.

    At sigma=0 every sample equals its class prototype, so the classes
    are trivially linearly separable.
    """
    c, h, w = spec.shape
    rng = np.random.default_rng(spec.seed)
    cells = rng.choice(h * w, size=spec.n_classes, replace=False)
    yy, xx = np.mgrid[0:h, 0:w]
    width = max(h, w) / 4.0
    protos = np.empty((spec.n_classes, c, h, w))
    for k in range(spec.n_classes):
        cy, cx = divmod(int(cells[k]), w)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
        protos[k] = blob[None, :, :]
    counts = spec.per_class
    if np.isscalar(counts):
        counts = (int(counts),) * spec.n_classes
    if len(counts) != spec.n_classes:
        raise InputError("per-class counts must match n_classes")
    images = np.repeat(protos, counts, axis=0)
    labels = np.repeat(np.arange(spec.n_classes, dtype=np.int64), counts)
    if spec.sigma > 0.0:
        images = images + spec.sigma * rng.standard_normal(images.shape)
    images = _quantize(np.clip(images, 0.0, 1.0))
    return Dataset(images, labels, spec.n_classes)


def split_holdout(dataset: Dataset, fraction: float, seed: int):
    """Seeded disjoint split: (holdout, remainder), taken before partitioning."""
    if not 0.0 < fraction < 1.0:
        raise InputError(f"fraction must be in (0,1), got {fraction}")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    take = max(1, int(round(fraction * n)))
    held = np.sort(rng.choice(n, size=take, replace=False))
    rest = np.setdiff1d(np.arange(n), held)
    return dataset.subset(held), dataset.subset(rest)


# ---------------------------------------------------------------------------
# Seed pools


def seed_pool(mode: str, shape=None, count: int = 0, seed: int = 0, path=None) -> SeedPool:
    """Synthesis-initialization pool: i.i.d. uniform noise or a FIDB file."""
    if mode == "random":
        if shape is None or count < 1:
            raise InputError("random pool needs an image shape and count >= 1")
        rng = np.random.default_rng(seed)
        c, h, w = shape
        images = _quantize(rng.uniform(0.0, 1.0, (count, c, h, w)))
        return SeedPool(images, "random")
    if mode == "file":
        if path is None:
            raise InputError("file pool needs a path")
        ds = load_dataset(path)
        if count and len(ds) < count:
            raise InputError(f"pool has {len(ds)} images, need {count}")
        return SeedPool(ds.images, "file")
    raise InputError(f"unknown pool mode {mode!r}")
