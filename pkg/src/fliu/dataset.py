"""
Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches and a seeded
Gaussian generator used as a desk-scale surrogate.

Image data is flattened and scaled by 1/255 into [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_RECORD_BYTES = 3073
CIFAR_PIXELS = 3072
CIFAR_CLASSES = 10


class DatasetError(ValueError):
    """Base class for dataset ingestion failures."""


class MagicMismatchError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


class InvalidLabelError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.features):
            raise DatasetError("features and labels must have equal length")
        if len(self.labels) == 0:
            raise DatasetError("dataset must contain at least one sample")
        if self.num_classes < 1:
            raise DatasetError("num_classes must be positive")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InvalidLabelError(f"labels must lie in [0, {self.num_classes})")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.features[indices].copy(),
            self.labels[indices].copy(),
            self.num_classes,
            name or self.name,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )


def _read_header(buf: bytes, path, expected_magic: int, ndims: int) -> tuple[int, ...]:
    header_len = 4 * (1 + ndims)
    if len(buf) < header_len:
        raise TruncatedFileError(f"{path}: file shorter than IDX header")
    magic, *dims = struct.unpack(f">{1 + ndims}I", buf[:header_len])
    if magic != expected_magic:
        raise MagicMismatchError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    return tuple(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "mnist") -> LabeledDataset:
    """Load an IDX image/label file pair (the MNIST distribution format)."""
    img_buf = Path(images_path).read_bytes()
    lbl_buf = Path(labels_path).read_bytes()

    count, rows, cols = _read_header(img_buf, images_path, IDX_IMAGES_MAGIC, 3)
    (label_count,) = _read_header(lbl_buf, labels_path, IDX_LABELS_MAGIC, 1)

    pixels = count * rows * cols
    if len(img_buf) - 16 < pixels:
        raise TruncatedFileError(f"{images_path}: expected {pixels} pixel bytes")
    if len(lbl_buf) - 8 < label_count:
        raise TruncatedFileError(f"{labels_path}: expected {label_count} label bytes")
    if count != label_count:
        raise CountMismatchError(f"{count} images but {label_count} labels")

    images = np.frombuffer(img_buf, dtype=np.uint8, count=pixels, offset=16)
    labels = np.frombuffer(lbl_buf, dtype=np.uint8, count=label_count, offset=8)
    features = images.reshape(count, rows * cols).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64), num_classes, name)


def write_idx(dataset: LabeledDataset, images_path, labels_path, shape: tuple[int, int] | None = None) -> None:
    """Write a dataset as an IDX pair. Features are quantized back to bytes."""
    n, d = dataset.features.shape
    rows, cols = shape if shape is not None else (1, d)
    if rows * cols != d:
        raise DatasetError(f"shape {shape} does not match feature dim {d}")
    pixels = np.rint(dataset.features * 255.0).clip(0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar10(batch_paths: Sequence, name: str = "cifar10") -> LabeledDataset:
    """Load and concatenate CIFAR-10 binary batches (1 label byte + 3072 pixels per record)."""
    if len(batch_paths) == 0:
        raise DatasetError("no CIFAR-10 batch files given")
    features, labels = [], []
    for path in batch_paths:
        buf = Path(path).read_bytes()
        if len(buf) == 0 or len(buf) % CIFAR_RECORD_BYTES != 0:
            raise TruncatedFileError(
                f"{path}: length {len(buf)} is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        if records[:, 0].max() >= CIFAR_CLASSES:
            raise InvalidLabelError(f"{path}: label byte >= {CIFAR_CLASSES}")
        labels.append(records[:, 0].astype(np.int64))
        features.append(records[:, 1:].astype(np.float64) / 255.0)
    return LabeledDataset(np.concatenate(features), np.concatenate(labels), CIFAR_CLASSES, name)


def _class_means(num_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    if dim >= num_classes:
        # scaled one-hot vertices: every pair exactly `separation` apart
        means = np.zeros((num_classes, dim))
        means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
        return means
    means = rng.standard_normal((num_classes, dim))
    diffs = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diffs**2).sum(-1))
    min_dist = dist[np.triu_indices(num_classes, 1)].min()
    return means * (separation / min_dist)


def generate_synthetic(
    num_classes: int,
    per_class: int,
    dim: int,
    separation: float,
    seed: int,
    noise: float = 1.0,
    name: str = "synthetic",
) -> LabeledDataset:
    """Isotropic Gaussian blobs, one per class.

    Labels cycle 0, 1, ..., L-1, 0, 1, ... so every prefix is class balanced.

    When ``dim >= num_classes`` the class means are equidistant at
    ``separation``; otherwise they are random directions rescaled so the
    closest pair is ``separation`` apart.
    """
    if num_classes < 2 or per_class < 1 or dim < 1:
        raise DatasetError("need num_classes >= 2, per_class >= 1, dim >= 1")
    if not separation > 0:
        raise DatasetError("separation must be positive")
    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, dim, separation, rng)
    labels = np.tile(np.arange(num_classes, dtype=np.int64), per_class)
    features = means[labels] + noise * rng.standard_normal((len(labels), dim))
    bound = np.abs(means).max() + 8.0 * noise
    np.clip(features, -bound, bound, out=features)
    return LabeledDataset(features, labels, num_classes, name)


def split_per_class(dataset: LabeledDataset, train_per_class: int) -> tuple[LabeledDataset, LabeledDataset]:
    """First ``train_per_class`` samples of every class go to train, the rest to test."""
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        train_idx.append(idx[:train_per_class])
        test_idx.append(idx[train_per_class:])
    train = dataset.subset(np.sort(np.concatenate(train_idx)), f"{dataset.name}-train")
    test = dataset.subset(np.sort(np.concatenate(test_idx)), f"{dataset.name}-test")
    return train, test
