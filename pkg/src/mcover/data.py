"""Dataset ingestion and preprocessing: IDX files, binarization, synthetic teachers."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .committee import forward_hard

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

# Conventional MNIST pixel statistics used for affine normalization.
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081


class IdxFormatError(ValueError):
    """Base class for IDX parse failures."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncationError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class DatasetSizeError(ValueError):
    """Requested more examples than the dataset provides."""


@dataclass(frozen=True)
class IdxDataset:
    images: np.ndarray  # (count, rows, cols) uint8
    labels: np.ndarray  # (count,) uint8
    provenance: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.images.shape[0]


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _parse_images(data: bytes, path) -> np.ndarray:
    if len(data) < 16:
        raise IdxTruncationError(
            f"{path}: image header needs 16 bytes, file has {len(data)} (offset 0)")
    magic, count, rows, cols = struct.unpack(">iiii", data[:16])
    if magic != IMAGE_MAGIC:
        raise IdxMagicError(
            f"{path}: bad image magic {magic} at offset 0 (expected {IMAGE_MAGIC})")
    expected = 16 + count * rows * cols
    if len(data) != expected:
        raise IdxTruncationError(
            f"{path}: expected {expected} bytes ({count}x{rows}x{cols} pixels "
            f"after offset 16), got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def _parse_labels(data: bytes, path) -> np.ndarray:
    if len(data) < 8:
        raise IdxTruncationError(
            f"{path}: label header needs 8 bytes, file has {len(data)} (offset 0)")
    magic, count = struct.unpack(">ii", data[:8])
    if magic != LABEL_MAGIC:
        raise IdxMagicError(
            f"{path}: bad label magic {magic} at offset 0 (expected {LABEL_MAGIC})")
    expected = 8 + count
    if len(data) != expected:
        raise IdxTruncationError(
            f"{path}: expected {expected} bytes ({count} labels after offset 8), "
            f"got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=8)


def read_idx(images_path, labels_path) -> IdxDataset:
    """Parse a paired IDX image/label file set with big-endian headers."""
    with open(images_path, "rb") as fh:
        img_bytes = fh.read()
    with open(labels_path, "rb") as fh:
        lab_bytes = fh.read()
    images = _parse_images(img_bytes, images_path)
    labels = _parse_labels(lab_bytes, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"image count {images.shape[0]} ({images_path}, offset 4) != "
            f"label count {labels.shape[0]} ({labels_path}, offset 4)")
    prov = {
        "images_path": str(images_path),
        "labels_path": str(labels_path),
        "images_sha256": _sha256(img_bytes),
        "labels_sha256": _sha256(lab_bytes),
    }
    return IdxDataset(images=images, labels=labels, provenance=prov)


def serialize_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    return struct.pack(">iiii", IMAGE_MAGIC, count, rows, cols) + images.tobytes()


def serialize_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">ii", LABEL_MAGIC, labels.shape[0]) + labels.tobytes()


def write_idx(dataset: IdxDataset, images_path, labels_path) -> None:
    with open(images_path, "wb") as fh:
        fh.write(serialize_idx_images(dataset.images))
    with open(labels_path, "wb") as fh:
        fh.write(serialize_idx_labels(dataset.labels))


def normalize_pixels(v):
    """Affine map (v/255 - mean) / std applied to raw pixel values."""
    return (np.asarray(v, dtype=np.float64) / 255.0 - MNIST_MEAN) / MNIST_STD


def normalize_mnist(dataset: IdxDataset) -> np.ndarray:
    """Flattened, normalized inputs of shape (count, rows*cols)."""
    return normalize_pixels(dataset.images).reshape(dataset.count, -1)


@dataclass(frozen=True)
class BinaryTwoClassSet:
    inputs: np.ndarray  # (P, n) int8 entries +-1
    labels: np.ndarray  # (P,) int8 entries +-1
    class_pair: tuple

    @property
    def p(self) -> int:
        return self.inputs.shape[0]


def binarize_two_class(dataset: IdxDataset, class_a: int, class_b: int,
                       threshold: float = 0.5, subsample_p: int | None = None,
                       rng: np.random.Generator | None = None) -> BinaryTwoClassSet:
    """Two-class +-1 problem: pixels above threshold*255 map to +1, labels a -> +1.

    With ``subsample_p`` set, draws a class-balanced subsample (counts differ
    by at most one) using ``rng``.
    """
    if class_a == class_b:
        raise ValueError("the two classes must differ")
    idx_a = np.flatnonzero(dataset.labels == class_a)
    idx_b = np.flatnonzero(dataset.labels == class_b)
    if subsample_p is not None:
        if rng is None:
            raise ValueError("subsampling requires an RNG")
        want_a = (subsample_p + 1) // 2
        want_b = subsample_p // 2
        if want_a > idx_a.size or want_b > idx_b.size:
            raise DatasetSizeError(
                f"requested {subsample_p} examples but classes {class_a}/{class_b} "
                f"have only {idx_a.size}/{idx_b.size}")
        idx_a = rng.choice(idx_a, size=want_a, replace=False)
        idx_b = rng.choice(idx_b, size=want_b, replace=False)
    sel = np.concatenate([idx_a, idx_b])
    if rng is not None:
        sel = rng.permutation(sel)
    flat = dataset.images[sel].reshape(sel.size, -1)
    inputs = np.where(flat > threshold * 255.0, 1, -1).astype(np.int8)
    labels = np.where(dataset.labels[sel] == class_a, 1, -1).astype(np.int8)
    return BinaryTwoClassSet(inputs=inputs, labels=labels,
                             class_pair=(class_a, class_b))


def synthetic_committee_teacher(n: int, k: int, p_train: int, p_test: int,
                                rng: np.random.Generator):
    """Teacher-labelled +-1 data from a random +-1 committee; train/test pair."""
    if k % 2 == 0:
        raise ValueError(f"hidden-unit count must be odd, got {k}")
    teacher = (rng.integers(0, 2, size=(k, n)) * 2 - 1).astype(np.float64)
    total = p_train + p_test
    x = (rng.integers(0, 2, size=(total, n)) * 2 - 1).astype(np.int8)
    y = forward_hard(teacher, x.astype(np.float64)).astype(np.int8)
    train = BinaryTwoClassSet(inputs=x[:p_train], labels=y[:p_train],
                              class_pair=(1, -1))
    test = BinaryTwoClassSet(inputs=x[p_train:], labels=y[p_train:],
                             class_pair=(1, -1))
    return train, test


def synthetic_image_classes(n_train: int, n_test: int, rng: np.random.Generator,
                            n_classes: int = 10, rows: int = 28, cols: int = 28,
                            modes_per_class: int = 3, signal: float = 28.0,
                            noise: float = 52.0):
    """MNIST-shaped synthetic classification data (multi-modal class prototypes).

    Stands in for image files when none are on disk; returns an
    (IdxDataset train, IdxDataset test) pair with uint8 pixels.
    """
    dim = rows * cols
    protos = rng.normal(0.0, 1.0, size=(n_classes, modes_per_class, dim))
    total = n_train + n_test
    labels = rng.integers(0, n_classes, size=total)
    modes = rng.integers(0, modes_per_class, size=total)
    pix = 96.0 + signal * protos[labels, modes] + noise * rng.normal(0.0, 1.0, (total, dim))
    images = np.clip(pix, 0, 255).astype(np.uint8).reshape(total, rows, cols)
    labels = labels.astype(np.uint8)
    prov = {"source": "synthetic_image_classes"}
    train = IdxDataset(images=images[:n_train], labels=labels[:n_train], provenance=prov)
    test = IdxDataset(images=images[n_train:], labels=labels[n_train:], provenance=prov)
    return train, test


def write_synthetic_idx(directory, n_train: int, n_test: int,
                        rng: np.random.Generator, **kwargs) -> dict:
    """Write a synthetic IDX quadruple into ``directory``; returns the file map."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train, test = synthetic_image_classes(n_train, n_test, rng, **kwargs)
    paths = {
        "train_images": directory / "train-images-idx3-ubyte",
        "train_labels": directory / "train-labels-idx1-ubyte",
        "test_images": directory / "t10k-images-idx3-ubyte",
        "test_labels": directory / "t10k-labels-idx1-ubyte",
    }
    write_idx(train, paths["train_images"], paths["train_labels"])
    write_idx(test, paths["test_images"], paths["test_labels"])
    return paths
