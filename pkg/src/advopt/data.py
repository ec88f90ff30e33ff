"""IDX image data: loading, saving, deterministic batching.

The IDX format is read and written bit-exactly: big-endian headers,
magic 0x00000803 for image files (dims N, H, W) and 0x00000801 for
label files (dim N), unsigned byte payloads in row-major order.
Pixels are scaled to [0, 1] on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ShapeMismatchError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


@dataclass
class Dataset:
    """Images ``[N, C, H, W]`` with values in [0, 1] and integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeMismatchError(f"images must be 4-D, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataFormatError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    header = 4 * (1 + ndim)
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) != header + count:
        raise DataFormatError(
            f"{path}: payload is {len(buf) - header} bytes, header promises {count}"
        )
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an image/label IDX pair, cross-checking the item counts."""
    raw = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if raw.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: {raw.shape[0]} images vs {labels.shape[0]} labels"
        )
    n, h, w = raw.shape
    images = (raw.astype(np.float64) / 255.0).reshape(n, 1, h, w)
    return Dataset(images, labels.astype(np.int64))


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset back to IDX; exact round-trip for loaded data."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DataFormatError("IDX export supports single-channel images only")
    raw = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(n, h, w)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
        f.write(raw.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_dir(data_dir, split: str = "train") -> Dataset:
    """Load the conventional file pair for ``split`` from a directory."""
    d = Path(data_dir)
    if split == "train":
        return load_idx(d / TRAIN_IMAGES, d / TRAIN_LABELS)
    if split == "test":
        return load_idx(d / TEST_IMAGES, d / TEST_LABELS)
    raise DataFormatError(f"unknown split {split!r} (want 'train' or 'test')")


def subset(dataset: Dataset, k: int, seed) -> Dataset:
    """First ``k`` examples after a seeded shuffle."""
    if k >= len(dataset):
        return dataset
    idx = np.random.default_rng(seed).permutation(len(dataset))[:k]
    return Dataset(dataset.images[idx], dataset.labels[idx])


def batches(dataset: Dataset, batch_size: int, seed) -> list[Batch]:
    """Seeded shuffle partitioned into batches; the last one may be short.

    The same seed always yields the same sequence, and every index
    appears in exactly one batch.
    """
    if len(dataset) == 0:
        raise DataFormatError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ShapeMismatchError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    out = []
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        out.append(Batch(dataset.images[idx], dataset.labels[idx]))
    return out


def gaussian_perturb(x: np.ndarray, seed) -> np.ndarray:
    """``x + 0.001 * z`` with standard-normal ``z``, deterministic in the seed.

    The result is intentionally not clamped; the first projection step of
    any attack restores feasibility.
    """
    rng = np.random.default_rng(seed)
    return x + 0.001 * rng.standard_normal(x.shape)
