"""Toy datasets for training the in-process targets."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # N×D or N×C×H×W, values in [0, 1]
    labels: np.ndarray  # N ints
    train_idx: np.ndarray
    test_idx: np.ndarray
    class_count: int

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.labels.shape != (n,):
            raise DataFormatError(f"{n} inputs but labels of shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError("labels out of range")
        both = np.concatenate([self.train_idx, self.test_idx])
        if both.size != n or np.unique(both).size != n:
            raise DataFormatError("train/test splits must be disjoint and cover every sample")

    @property
    def input_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.train_idx], self.labels[self.train_idx]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.test_idx], self.labels[self.test_idx]

    def save(self, path) -> None:
        np.savez(path, inputs=self.inputs, labels=self.labels, train_idx=self.train_idx,
                 test_idx=self.test_idx, class_count=np.int64(self.class_count))

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            return cls(z["inputs"].astype(np.float64), z["labels"].astype(np.int64), z["train_idx"],
                       z["test_idx"], int(z["class_count"]))


def split_indices(n: int, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def gen_blobs(classes: int, dims: int, n_per_class: int, spread: float, seed: int, test_fraction: float = 0.25, radius: float = 0.3) -> Dataset:
    """Isotropic Gaussian clusters inside the unit cube.

    Class means sit on a circle of ``radius`` around the cube centre in the
    first two coordinates; samples are clipped to [0, 1].
    """
    if classes < 2 or dims < 2:
        raise ValueError("gen_blobs needs classes >= 2 and dims >= 2")
    if not spread > 0:
        raise ValueError(f"spread must be positive, got {spread}")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = np.full((classes, dims), 0.5)
    means[:, 0] += radius * np.cos(angles)
    means[:, 1] += radius * np.sin(angles)
    labels = np.repeat(np.arange(classes), n_per_class)
    inputs = np.clip(means[labels] + rng.normal(0.0, spread, size=(labels.size, dims)), 0.0, 1.0)
    train_idx, test_idx = split_indices(labels.size, test_fraction, rng)
    return Dataset(inputs, labels.astype(np.int64), train_idx, test_idx, classes)


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(blob: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(blob) < 4:
        raise DataFormatError(f"{what}: truncated header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise DataFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    count = int(np.prod(dims))
    if len(blob) - head < count:
        raise DataFormatError(f"{what}: truncated payload ({len(blob) - head} of {count} bytes)")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path, test_fraction: float = 0.2, seed: int = 0, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into an N×1×H×W dataset."""
    images = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    labels = labels.astype(np.int64)
    class_count = max(class_count, int(labels.max()) + 1 if labels.size else class_count)
    train_idx, test_idx = split_indices(labels.size, test_fraction, np.random.default_rng(seed))
    return Dataset(inputs, labels, train_idx, test_idx, class_count)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N×H×W) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())
