"""Dataset ingestion for the two benchmark datasets.

Reads the canonical published archives from a dataset root:

    <root>/mnist/train-images-idx3-ubyte[.gz]   (+labels, +t10k pair)
    <root>/cifar10/cifar-10-batches-py/data_batch_{1..5}, test_batch

MNIST pixels are scaled to [0,1]; CIFAR10 is standardized per channel.
The root defaults to $WBMARK_DATA (falling back to ./data).
"""

from __future__ import annotations

import gzip
import os
import pickle
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wbmark.errors import IngestError

DATA_ENV = "WBMARK_DATA"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# Channel statistics of the CIFAR10 training split, used for
# per-channel standardization.
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class DatasetSplit:
    """In-memory split: images (N,C,H,W) float32, labels (N,) int64."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise IngestError("image/label count mismatch")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "DatasetSplit":
        idx = np.asarray(indices, dtype=np.int64)
        return DatasetSplit(self.images[idx], self.labels[idx])


def default_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            magic = struct.unpack(">I", f.read(4))[0]
            ndim = magic & 0xFF
            if magic >> 8 != 0x8 or ndim not in (1, 3):
                raise IngestError(f"{path}: bad IDX magic {magic:#x}")
            dims = struct.unpack(">" + "I" * ndim, f.read(4 * ndim))
            data = np.frombuffer(f.read(), dtype=np.uint8)
    except (OSError, struct.error) as e:
        raise IngestError(f"{path}: unreadable ({e})") from e
    n = int(np.prod(dims))
    if data.size != n:
        raise IngestError(f"{path}: expected {n} bytes of payload, found {data.size}")
    return data.reshape(dims)


def _find_mnist_file(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / (stem + ".gz")):
        if cand.is_file():
            return cand
    raise IngestError(f"missing dataset file {root / stem} (or .gz)")


def _load_mnist(root: Path) -> tuple[DatasetSplit, DatasetSplit]:
    d = root / "mnist"
    arrays = {k: _read_idx(_find_mnist_file(d, v)) for k, v in MNIST_FILES.items()}
    for key, count in (("train", 60000), ("test", 10000)):
        imgs, labs = arrays[f"{key}_images"], arrays[f"{key}_labels"]
        if imgs.shape != (count, 28, 28):
            raise IngestError(f"{MNIST_FILES[f'{key}_images']}: bad shape {imgs.shape}")
        if labs.shape != (count,) or labs.max() > 9:
            raise IngestError(f"{MNIST_FILES[f'{key}_labels']}: bad labels")

    def split(key):
        x = arrays[f"{key}_images"].astype(np.float32) / 255.0
        return DatasetSplit(x[:, None, :, :], arrays[f"{key}_labels"].astype(np.int64))

    return split("train"), split("test")


def _load_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise IngestError(f"missing dataset file {path}")
    try:
        with open(path, "rb") as f:
            batch = pickle.load(f, encoding="bytes")
        x = np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
        y = np.asarray(batch[b"labels"], dtype=np.int64)
    except Exception as e:
        raise IngestError(f"{path}: unreadable CIFAR batch ({e})") from e
    return x, y


def _load_cifar10(root: Path) -> tuple[DatasetSplit, DatasetSplit]:
    d = root / "cifar10" / "cifar-10-batches-py"
    xs, ys = [], []
    for i in range(1, 6):
        x, y = _load_cifar_batch(d / f"data_batch_{i}")
        xs.append(x)
        ys.append(y)
    train_x = np.concatenate(xs)
    train_y = np.concatenate(ys)
    test_x, test_y = _load_cifar_batch(d / "test_batch")
    if train_x.shape != (50000, 3, 32, 32) or test_x.shape != (10000, 3, 32, 32):
        raise IngestError(f"{d}: unexpected CIFAR10 split sizes")

    mean = np.asarray(CIFAR10_MEAN, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(CIFAR10_STD, dtype=np.float32).reshape(1, 3, 1, 1)

    def norm(x):
        return (x.astype(np.float32) / 255.0 - mean) / std

    return (DatasetSplit(norm(train_x), train_y),
            DatasetSplit(norm(test_x), test_y))


def ingest_dataset(name: str, root: str | Path | None = None) -> tuple[DatasetSplit, DatasetSplit]:
    """Load (train, test) splits of 'mnist' or 'cifar10' from the dataset root."""
    root = Path(root) if root is not None else default_root()
    key = name.strip().lower()
    if key == "mnist":
        return _load_mnist(root)
    if key == "cifar10":
        return _load_cifar10(root)
    raise IngestError(f"unknown dataset {name!r} (expected 'mnist' or 'cifar10')")
