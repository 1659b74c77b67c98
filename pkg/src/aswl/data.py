"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, batching.

Images are scaled to [0, 1] with no centering. Gzip-compressed files are
accepted transparently (sniffed from the two-byte gzip magic).
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import default_dtype

DATA_DIR_ENV = "ASWL_DATA_DIR"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


@dataclass
class Dataset:
    images: np.ndarray            # [N, H, W, C], values in [0, 1]
    labels: np.ndarray            # [N] integers in [0, classes)
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"image/label count mismatch: {self.images.shape[0]} vs {self.labels.shape[0]}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels out of range [0, {self.classes})")

    def __len__(self) -> int:
        return self.images.shape[0]


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _idx_header(buf: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated header, have {len(buf)} bytes")
    got = struct.unpack_from(">I", buf, 0)[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0 (want 0x{magic:08x})")
    return struct.unpack_from(f">{ndim}I", buf, 4)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair (optionally gzipped)."""
    ibuf = _read_bytes(images_path)
    n, rows, cols = _idx_header(ibuf, images_path, IDX_IMAGES_MAGIC, 3)
    offset = 16
    expected = offset + n * rows * cols
    if len(ibuf) != expected:
        raise FormatError(
            f"{images_path}: expected {expected} bytes for {n} images, have {len(ibuf)} "
            f"(offset {min(len(ibuf), expected)})")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * rows * cols, offset=offset)
    images = pixels.reshape(n, rows, cols, 1).astype(default_dtype()) / 255.0

    lbuf = _read_bytes(labels_path)
    (n_labels,) = _idx_header(lbuf, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lbuf) != 8 + n_labels:
        raise FormatError(
            f"{labels_path}: expected {8 + n_labels} bytes for {n_labels} labels, have {len(lbuf)}")
    if n_labels != n:
        raise FormatError(f"{labels_path}: {n_labels} labels for {n} images")
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(
            f"{labels_path}: label {labels[bad]} out of range at offset {8 + bad}")
    return Dataset(images=images, labels=labels, classes=10)


def load_cifar10(root, split: str = "train") -> Dataset:
    """Load CIFAR-10 binary batches from a directory."""
    root = Path(root)
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    all_images = []
    all_labels = []
    for name in names:
        buf = _read_bytes(root / name)
        if len(buf) == 0 or len(buf) % CIFAR_RECORD_BYTES:
            raise FormatError(
                f"{root / name}: length {len(buf)} is not a multiple of "
                f"{CIFAR_RECORD_BYTES}-byte records")
        records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.max() > 9:
            raise FormatError(f"{root / name}: label {labels.max()} out of range")
        images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        all_images.append(images.astype(default_dtype()) / 255.0)
        all_labels.append(labels)
    return Dataset(images=np.concatenate(all_images), labels=np.concatenate(all_labels),
                   classes=10, split=split)


def load_dataset(name: str, root=None, split: str = "train") -> Dataset:
    """Load a dataset by name ('mnist' or 'cifar10') from a root directory.

    The root defaults to the ASWL_DATA_DIR environment variable.
    """
    root = Path(root or os.environ.get(DATA_DIR_ENV, "data"))
    if name == "mnist":
        images_name, labels_name = MNIST_FILES[split if split in MNIST_FILES else "train"]
        images = _find_file(root, images_name)
        labels = _find_file(root, labels_name)
        ds = load_mnist_idx(images, labels)
        ds.split = split
        return ds
    if name == "cifar10":
        return load_cifar10(root, split=split)
    raise ValueError(f"unknown dataset {name!r}")


def _find_file(root: Path, stem: str) -> Path:
    for candidate in (root / stem, root / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{root / stem}[.gz] not found")


def split_dataset(dataset: Dataset, holdout: int) -> tuple[Dataset, Dataset]:
    """Split off the last `holdout` examples as a validation set."""
    if not 0 < holdout < len(dataset):
        raise ValueError(f"holdout {holdout} invalid for dataset of {len(dataset)}")
    cut = len(dataset) - holdout
    head = Dataset(images=dataset.images[:cut], labels=dataset.labels[:cut],
                   classes=dataset.classes, split=dataset.split)
    tail = Dataset(images=dataset.images[cut:], labels=dataset.labels[cut:],
                   classes=dataset.classes, split="val")
    return head, tail


def batches(dataset: Dataset, batch_size: int, seed=0, shuffle: bool = True):
    """Yield (images, labels) batches; the last partial batch is included.

    The permutation is a deterministic function of the seed, which may be
    anything numpy's SeedSequence accepts (an int or a list of ints).
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, have {batch_size}")
    n = len(dataset)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
