"""Labeled datasets: the SynthShapes generator and a CIFAR-10 binary reader."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .seeding import derive_seed, rng

SHAPE_CLASSES = (
    "circle", "square", "triangle", "cross", "ring",
    "star", "bars_h", "bars_v", "checker", "blob",
)
CLEAN_DOMAIN = "clean"

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_BATCH = 10000


class SealedLabelsError(PermissionError):
    """Raised when adaptation code tries to read labels of an adaptation set."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray          # N x 3 x 32 x 32 float32 in [0, 1]
    labels: np.ndarray          # N int64
    domain_tags: np.ndarray     # N str
    class_count: int

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1:] != (3, 32, 32):
            raise ValueError(f"images must be N x 3 x 32 x 32, got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.domain_tags) != len(self.images):
            raise ValueError("images, labels and domain_tags must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels out of range")
        _freeze(self.images)
        _freeze(self.labels)
        _freeze(self.domain_tags)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def category_set(self) -> frozenset[int]:
        return frozenset(int(c) for c in np.unique(self.labels))

    @property
    def domain_set(self) -> frozenset[str]:
        return frozenset(str(d) for d in np.unique(self.domain_tags))

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return LabeledDataset(self.images[idx].copy(), self.labels[idx].copy(), self.domain_tags[idx].copy(), self.class_count)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update("\0".join(map(str, self.domain_tags)).encode())
        return h.hexdigest()


def concat(datasets: Sequence[LabeledDataset]) -> LabeledDataset:
    if not datasets:
        raise ValueError("nothing to concatenate")
    return LabeledDataset(
        np.concatenate([d.images for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        np.concatenate([d.domain_tags for d in datasets]),
        max(d.class_count for d in datasets),
    )


class AdaptationSet:
    """Unlabeled view of a dataset restricted to ``indices``.

    Adaptation code sees images only; labels are reachable solely through
    :func:`sealed_labels`, which the evaluation code uses.
    """

    __slots__ = ("_dataset", "_indices")

    def __init__(self, dataset: LabeledDataset, indices) -> None:
        idx = np.asarray(indices, dtype=np.intp)
        if len(np.unique(idx)) != len(idx):
            raise ValueError("adaptation indices must be unique")
        if idx.size and (idx.min() < 0 or idx.max() >= len(dataset)):
            raise IndexError("adaptation index out of range")
        object.__setattr__(self, "_dataset", dataset)
        object.__setattr__(self, "_indices", _freeze(idx))

    def __setattr__(self, name, value):
        raise AttributeError("AdaptationSet is immutable")

    def __len__(self) -> int:
        return len(self._indices)

    @property
    def labels(self):
        raise SealedLabelsError("labels of an adaptation set are sealed")

    @property
    def indices(self) -> np.ndarray:
        return self._indices

    @property
    def images(self) -> np.ndarray:
        return self._dataset.images[self._indices]

    @property
    def domain_set(self) -> frozenset[str]:
        return frozenset(str(d) for d in np.unique(self._dataset.domain_tags[self._indices]))

    @property
    def domain_tags(self) -> np.ndarray:
        return self._dataset.domain_tags[self._indices]

    def batch_order(self, seed: int) -> np.ndarray:
        return rng(seed, "batch-order").permutation(len(self))

    def batches(self, batch_size: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (positions, images) in seeded shuffled order; the last batch may be partial."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        order = self.batch_order(seed)
        images = self._dataset.images
        for start in range(0, len(order), batch_size):
            pos = order[start:start + batch_size]
            yield pos, images[self._indices[pos]]

    def digest(self) -> str:
        h = hashlib.sha256(self._dataset.digest().encode())
        h.update(self._indices.astype("<i8").tobytes())
        return h.hexdigest()


def sealed_labels(aset: AdaptationSet) -> np.ndarray:
    """Evaluation-only access to the hidden labels of an adaptation set."""
    return aset._dataset.labels[aset._indices]


def sealed_dataset(aset: AdaptationSet) -> LabeledDataset:
    """Evaluation-only: the adaptation set as a labeled dataset."""
    return aset._dataset.subset(aset._indices)


# --- SynthShapes ---------------------------------------------------------------------

_SUPER = 2          # supersampling factor for anti-aliasing
_SIZE = 32


def _shape_mask(cls: str, u: np.ndarray, v: np.ndarray, g: np.random.Generator) -> np.ndarray:
    r = np.hypot(u, v)
    phi = np.arctan2(v, u)
    if cls == "circle":
        return r < 0.8
    if cls == "square":
        return np.maximum(np.abs(u), np.abs(v)) < 0.68
    if cls == "triangle":
        return (v < 0.55) & (np.sqrt(3) * np.abs(u) < v + 0.8)
    if cls == "cross":
        return ((np.abs(u) < 0.24) & (np.abs(v) < 0.85)) | ((np.abs(v) < 0.24) & (np.abs(u) < 0.85))
    if cls == "ring":
        return (r > 0.48) & (r < 0.85)
    if cls == "star":
        return r < 0.42 + 0.38 * np.cos(5 * phi) ** 2 * (np.cos(5 * phi) > 0)
    if cls == "bars_h":
        return (np.abs(u) < 0.85) & (np.abs(v) < 0.85) & (np.sin(v * np.pi * 2.35 + np.pi / 2) > 0)
    if cls == "bars_v":
        return (np.abs(u) < 0.85) & (np.abs(v) < 0.85) & (np.sin(u * np.pi * 2.35 + np.pi / 2) > 0)
    if cls == "checker":
        inside = (np.abs(u) < 0.85) & (np.abs(v) < 0.85)
        return inside & ((np.floor((u + 0.85) / 0.425) + np.floor((v + 0.85) / 0.425)) % 2 == 0)
    if cls == "blob":
        a1, a2 = g.uniform(0.08, 0.2, 2)
        p1, p2 = g.uniform(0, 2 * np.pi, 2)
        return r < 0.55 + a1 * np.sin(3 * phi + p1) + a2 * np.sin(2 * phi + p2)
    raise ValueError(cls)


_ROTATION_LIMIT = {"bars_h": 15, "bars_v": 15, "checker": 15, "square": 20, "cross": 20}


def _render(cls: str, g: np.random.Generator) -> np.ndarray:
    n = _SIZE * _SUPER
    coords = (np.arange(n) + 0.5) / _SUPER - _SIZE / 2
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx, cy = g.uniform(-3.5, 3.5, 2)
    scale = g.uniform(9.0, 12.5)
    limit = _ROTATION_LIMIT.get(cls, 180)
    theta = np.deg2rad(g.uniform(-limit, limit))
    x, y = (xx - cx) / scale, (yy - cy) / scale
    u = np.cos(theta) * x + np.sin(theta) * y
    v = -np.sin(theta) * x + np.cos(theta) * y
    mask = _shape_mask(cls, u, v, g).astype(np.float64)
    mask = mask.reshape(_SIZE, _SUPER, _SIZE, _SUPER).mean(axis=(1, 3))
    bg = g.uniform(0.0, 1.0, 3)
    fg = g.uniform(0.0, 1.0, 3)
    while np.linalg.norm(fg - bg) < 0.55:
        fg = g.uniform(0.0, 1.0, 3)
    bg_tex = _texture(g) * g.uniform(0.0, 0.35)
    fg_tex = _texture(g) * g.uniform(0.0, 0.25)
    bg_img = bg[:, None, None] + bg_tex * g.uniform(-1.0, 1.0, 3)[:, None, None]
    fg_img = fg[:, None, None] + fg_tex * g.uniform(-1.0, 1.0, 3)[:, None, None]
    img = bg_img * (1 - mask) + fg_img * mask
    img = img + g.normal(0.0, g.uniform(0.0, 0.05), img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _texture(g: np.random.Generator) -> np.ndarray:
    """Zero-mean smooth field in roughly [-0.5, 0.5] (bilinear upsampling of coarse noise)."""
    grid = int(g.integers(3, 9))
    coarse = g.uniform(-0.5, 0.5, (grid, grid))
    pos = np.linspace(0, grid - 1, _SIZE)
    rows = np.array([np.interp(pos, np.arange(grid), r) for r in coarse])
    return np.array([np.interp(pos, np.arange(grid), c) for c in rows.T]).T


def generate_synthshapes(classes: int = 10, per_class: int = 200, seed: int = 0) -> LabeledDataset:
    """Class-balanced 32x32 RGB renders of parametric shapes with seeded jitter."""
    if not 2 <= classes <= len(SHAPE_CLASSES):
        raise ValueError(f"classes must be in [2, {len(SHAPE_CLASSES)}]")
    n = classes * per_class
    images = np.empty((n, 3, _SIZE, _SIZE), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    for i, c in enumerate(labels):
        images[i] = _render(SHAPE_CLASSES[c], rng(seed, "synthshapes", i))
    order = rng(seed, "synthshapes-order").permutation(n)
    return LabeledDataset(images[order], labels[order].astype(np.int64), np.full(n, CLEAN_DOMAIN, dtype=object), classes)


# --- CIFAR-10 binary -----------------------------------------------------------------

def read_cifar10_records(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) % CIFAR_RECORD:
        raise ValueError(f"bad record length: {len(blob)} bytes is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise ValueError(f"label byte {labels.max()} >= 10")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_binary(path, subset: int | None = None, seed: int = 0) -> LabeledDataset:
    """Read one ``.bin`` batch file or every ``*.bin`` in a directory.

    ``subset`` draws that many samples per class, class-balanced by seed.
    """
    path = Path(path)
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 .bin files under {path}")
    parts = [read_cifar10_records(f.read_bytes()) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if subset is not None:
        g = rng(seed, "cifar-subset")
        chosen = []
        for c in range(10):
            pool = np.flatnonzero(labels == c)
            if len(pool) < subset:
                raise ValueError(f"class {c} has {len(pool)} samples, {subset} requested")
            chosen.append(np.sort(g.choice(pool, subset, replace=False)))
        idx = np.concatenate(chosen)
        images, labels = images[idx], labels[idx]
    return LabeledDataset(images, labels, np.full(len(labels), CLEAN_DOMAIN, dtype=object), 10)


def image_seed(seed: int, index: int) -> int:
    return derive_seed(seed, "image", index)
