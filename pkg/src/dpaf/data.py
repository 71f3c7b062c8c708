"""Datasets: synthetic pattern images, IDX files, and epoch batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class BatchingError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, c, side, side) in [-1, 1]
    labels: np.ndarray  # (N,) ints
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[2] != images.shape[3]:
            raise ValueError(f"images must be (N, c, side, side), got {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if len(images) < 1:
            raise ValueError("dataset is empty")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if images.min() < -1 or images.max() > 1:
            raise ValueError("pixel values must lie in [-1, 1]")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class ClassPattern:
    """One class: a Gaussian blob at ``blob`` (fractions of the side) plus stripes.

    ``stripe_freq`` is in cycles per image; positive values stripe along rows,
    negative along columns, zero disables stripes.
    """

    blob: tuple[float, float] = (0.5, 0.5)
    blob_radius: float = 0.18
    stripe_freq: float = 0.0
    stripe_amp: float = 0.3


DEFAULT_PATTERNS = (
    ClassPattern(blob=(0.3, 0.3), stripe_freq=2.0),
    ClassPattern(blob=(0.7, 0.7), stripe_freq=-2.0),
    ClassPattern(blob=(0.3, 0.7), stripe_freq=3.0),
    ClassPattern(blob=(0.7, 0.3), stripe_freq=-3.0),
)

# Below this noise level the default two-class patterns stay separable by a
# nearest-centroid rule; see tests/test_data.py.
SEPARABLE_NOISE = 0.5


def synth_dataset(
    n: int,
    num_classes: int = 2,
    side: int = 16,
    seed: int = 0,
    noise: float = 0.1,
    jitter: float = 0.08,
    patterns: Sequence[ClassPattern] | None = None,
    channels: int = 1,
) -> LabeledDataset:
    """Deterministic labelled pattern images; labels assigned round-robin.

    Each sample jitters its blob centre by up to ``jitter`` (fraction of the
    side) and adds N(0, noise^2) pixel noise before clipping to [-1, 1].
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    patterns = tuple(patterns or DEFAULT_PATTERNS)
    if len(patterns) < num_classes:
        raise ValueError(f"{len(patterns)} patterns for {num_classes} classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    yy, xx = np.meshgrid(np.arange(side) + 0.5, np.arange(side) + 0.5, indexing="ij")
    yy, xx = yy / side, xx / side
    images = np.empty((n, channels, side, side))
    for i, lab in enumerate(labels):
        pat = patterns[lab]
        cy, cx = np.asarray(pat.blob) + rng.uniform(-jitter, jitter, 2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * pat.blob_radius**2))
        img = 2.0 * blob - 1.0
        if pat.stripe_freq:
            coord = yy if pat.stripe_freq > 0 else xx
            img = img + pat.stripe_amp * np.sin(2 * np.pi * abs(pat.stripe_freq) * coord)
        img = img[None] + rng.normal(0.0, noise, (channels, side, side)) if noise else img[None].repeat(channels, 0)
        images[i] = np.clip(img, -1.0, 1.0)
    return LabeledDataset(images, labels, num_classes)


def _read_header(data: bytes, magic: int, ndim: int, what: str):
    if len(data) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{what}: header truncated")
    (got,) = struct.unpack_from(">I", data, 0)
    if got != magic:
        raise IdxMagicError(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    return dims, 4 + 4 * ndim


def read_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Load an IDX image/label pair, mapping pixels 0..255 to [-1, 1]."""
    with open(images_path, "rb") as f:
        img_data = f.read()
    with open(labels_path, "rb") as f:
        lab_data = f.read()
    (n, rows, cols), off = _read_header(img_data, IDX_IMAGES_MAGIC, 3, "images")
    (n_lab,), loff = _read_header(lab_data, IDX_LABELS_MAGIC, 1, "labels")
    if len(img_data) - off < n * rows * cols:
        raise IdxTruncatedError(f"images: expected {n * rows * cols} pixel bytes")
    if len(lab_data) - loff < n_lab:
        raise IdxTruncatedError(f"labels: expected {n_lab} label bytes")
    if n != n_lab:
        raise IdxCountMismatchError(f"{n} images but {n_lab} labels")
    pixels = np.frombuffer(img_data, np.uint8, n * rows * cols, off).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab_data, np.uint8, n_lab, loff).astype(np.int64)
    k = num_classes or int(labels.max()) + 1
    return LabeledDataset(pixels.astype(np.float64) * (2.0 / 255.0) - 1.0, labels, max(k, 2))


def write_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX pair (pixels re-quantized to bytes)."""
    if dataset.channels != 1:
        raise ValueError("IDX export supports single-channel images only")
    n, _, rows, cols = dataset.images.shape
    px = np.rint((dataset.images[:, 0] + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(px.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


@dataclass
class EpochBatches:
    batches: list[np.ndarray] = field(default_factory=list)
    rate: float = 1.0

    def __iter__(self):
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


def subsample_batches(
    n: int | LabeledDataset, batch_size: int, num_batches: int, rng: np.random.Generator
) -> EpochBatches:
    """``num_batches`` disjoint index batches from one fresh permutation.

    ``rate`` is the subsampling rate B/N the accountant is given.
    """
    n = len(n) if isinstance(n, LabeledDataset) else int(n)
    if batch_size < 1 or num_batches < 1:
        raise BatchingError("batch size and batch count must be >= 1")
    if batch_size * num_batches > n:
        raise BatchingError(
            f"{num_batches} batches of {batch_size} exceed the dataset size {n}"
        )
    perm = rng.permutation(n)
    batches = [perm[i * batch_size : (i + 1) * batch_size] for i in range(num_batches)]
    return EpochBatches(batches, batch_size / n)


def make_neighbor(dataset: LabeledDataset, index: int) -> LabeledDataset:
    """The dataset with sample ``index`` removed."""
    n = len(dataset)
    if not 0 <= index < n:
        raise IndexError(f"index {index} out of range for {n} samples")
    if n == 1:
        raise ValueError("removing the only sample leaves an empty dataset")
    keep = np.delete(np.arange(n), index)
    return dataset.subset(keep)
