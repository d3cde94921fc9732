"""Dataset ingestion (IDX, CIFAR-10 binary) and synthetic data."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

DATA_DIR_ENV = "SPLASHLAB_DATA_DIR"

IDX_UBYTE = 0x08
IDX_FLOAT64 = 0x0E
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


class IdxMagicError(DatasetError):
    pass


class IdxTruncatedError(DatasetError):
    pass


class IdxCountMismatchError(DatasetError):
    pass


class RecordSizeError(DatasetError):
    pass


@dataclass
class Dataset:
    images: np.ndarray      # (N, C, H, W) in [0, 1]
    labels: np.ndarray      # (N,) int64
    name: str = "dataset"
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.name, self.split, self.num_classes)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------
def _read_idx(path, expect_labels: bool) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    dtype_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if magic >> 16 != 0:
        raise IdxMagicError(f"{path}: bad IDX magic 0x{magic:08x}")
    if expect_labels:
        if magic != LABELS_MAGIC:
            raise IdxMagicError(f"{path}: expected label magic 0x{LABELS_MAGIC:08x}, got 0x{magic:08x}")
    elif dtype_code not in (IDX_UBYTE, IDX_FLOAT64) or ndim not in (3, 4):
        raise IdxMagicError(f"{path}: expected image magic 0x{IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    itemsize = 1 if dtype_code == IDX_UBYTE else 8
    need = int(np.prod(dims)) * itemsize
    if len(raw) - header < need:
        raise IdxTruncatedError(f"{path}: expected {need} data bytes, found {len(raw) - header}")
    dt = np.uint8 if dtype_code == IDX_UBYTE else np.dtype(">f8")
    arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=header).reshape(dims)
    if dtype_code == IDX_UBYTE and not expect_labels:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) if dtype_code == IDX_FLOAT64 else arr.astype(np.int64)


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "train", num_classes: int = 10) -> Dataset:
    images = _read_idx(images_path, expect_labels=False)
    labels = _read_idx(labels_path, expect_labels=True)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.ndim == 3:
        images = images[:, None]
    return Dataset(images, labels, name, split, num_classes)


def write_idx_images(path, images: np.ndarray, exact: bool = False) -> None:
    """Write images as unsigned bytes (pixels * 255) or, with ``exact``, float64."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 4 and images.shape[1] == 1:
        images = images[:, 0]
    dims = images.shape
    if exact:
        magic = (IDX_FLOAT64 << 8) | len(dims)
        body = images.astype(">f8").tobytes()
    else:
        magic = (IDX_UBYTE << 8) | len(dims)
        body = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + body)


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    Path(path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes())


def write_idx(dataset: Dataset, images_path, labels_path, exact: bool = False) -> None:
    write_idx_images(images_path, dataset.images, exact=exact)
    write_idx_labels(labels_path, dataset.labels)


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------
CIFAR_RECORD = 1 + 3 * 32 * 32


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise RecordSizeError(f"{path}: {raw.size} bytes is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10_binary(directory, split: str = "train") -> Dataset:
    directory = Path(directory)
    files = sorted(directory.glob("data_batch_*.bin")) if split == "train" else [directory / "test_batch.bin"]
    files = [f for f in files if f.exists()]
    if not files:
        raise DatasetError(f"no CIFAR-10 {split} batches under {directory}")
    parts = [read_cifar10_batch(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, "cifar10", split)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------
def mnist_like(n: int, seed: int = 0, split: str = "train", size: int = 28, num_classes: int = 10,
               noise: float = 0.2, jitter: float = 1.0) -> Dataset:
    """Deterministic 28x28 Gaussian-blob classification set.

    Each class owns a fixed arrangement of strokes made of Gaussian blobs
    (shared across splits); samples jitter blob positions and amplitudes and
    add pixel noise. Pixels are quantised to k/255 so IDX round trips are exact.
    """
    if n < 0:
        raise DatasetError("n must be non-negative")
    proto_rng = np.random.default_rng(12345)
    n_blobs = 6
    centers = proto_rng.uniform(6, size - 6, size=(num_classes, n_blobs, 2))
    widths = proto_rng.uniform(1.5, 3.0, size=(num_classes, n_blobs))
    split_offset = {"train": 0, "test": 1}.get(split, 2)
    rng = np.random.default_rng([seed, split_offset])
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = centers[labels] + rng.normal(0, jitter, size=(n, n_blobs, 2))
    shift = rng.normal(0, 1.5, size=(n, 1, 2))
    c = c + shift
    amp = rng.uniform(0.4, 1.0, size=(n, n_blobs))
    w = widths[labels] * rng.uniform(0.8, 1.25, size=(n, 1))
    img = np.empty((n, size, size))
    for lo in range(0, n, 1000):
        sl = slice(lo, lo + 1000)
        d2 = (yy - c[sl, :, 0, None, None]) ** 2 + (xx - c[sl, :, 1, None, None]) ** 2
        img[sl] = (amp[sl, :, None, None] * np.exp(-d2 / (2 * w[sl, :, None, None] ** 2))).sum(1)
    img = img + rng.normal(0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    img = np.rint(img * 255.0) / 255.0
    return Dataset(img[:, None], labels, "mnist-like", split, num_classes)


def _flattened_relu(x, alpha: float = 1.5):
    return np.minimum(np.maximum(x, 0.0), alpha)


def synthetic_grounded_functions() -> dict[str, Callable[[np.ndarray], np.ndarray]]:
    """Grounded (f(0)=0) target functions for the approximation experiments."""
    return {
        "identity": lambda x: np.asarray(x, dtype=np.float64) * 1.0,
        "abs": lambda x: np.abs(np.asarray(x, dtype=np.float64)),
        "tanh": lambda x: np.tanh(np.asarray(x, dtype=np.float64)),
        "xsin": lambda x: np.asarray(x, dtype=np.float64) * np.sin(3.0 * np.asarray(x, dtype=np.float64)),
        "flat-relu": lambda x: _flattened_relu(np.asarray(x, dtype=np.float64)),
    }


def subsample(dataset: Dataset, n: int, seed: int, stratified: bool = False) -> Dataset:
    N = len(dataset)
    if n > N:
        raise DatasetError(f"cannot draw {n} samples from {N}")
    if n < 0:
        raise DatasetError("n must be non-negative")
    rng = np.random.default_rng(seed)
    if not stratified:
        return dataset.take(np.sort(rng.choice(N, size=n, replace=False)))
    classes, counts = np.unique(dataset.labels, return_counts=True)
    quota = np.floor(counts / N * n).astype(int)
    # hand leftover slots to the classes with the largest remainders
    rem = counts / N * n - quota
    for i in np.argsort(-rem, kind="stable")[: n - quota.sum()]:
        quota[i] += 1
    picks = []
    for cls, q in zip(classes, quota):
        members = np.flatnonzero(dataset.labels == cls)
        picks.append(rng.choice(members, size=q, replace=False))
    return dataset.take(np.sort(np.concatenate(picks)))


def resolve_dataset(source: str, split: str, n: int | None = None, seed: int = 0) -> Dataset:
    """Load a dataset from 'synthetic', a directory, or a name under $SPLASHLAB_DATA_DIR.

    A directory holding ``*-images-idx3-ubyte`` files is read as MNIST; one
    holding ``data_batch_*.bin`` / ``test_batch.bin`` as CIFAR-10.
    """
    if source in ("synthetic", "mnist-like"):
        size = n if n is not None else (6000 if split == "train" else 1000)
        return mnist_like(size, seed=seed, split=split)
    path = Path(source)
    if not path.exists() and os.environ.get(DATA_DIR_ENV):
        path = Path(os.environ[DATA_DIR_ENV]) / source
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {source}")
    prefix = "train" if split == "train" else "t10k"
    img = path / f"{prefix}-images-idx3-ubyte"
    if img.exists():
        ds = load_idx(img, path / f"{prefix}-labels-idx1-ubyte", name=path.name, split=split)
    else:
        ds = load_cifar10_binary(path, split)
    if n is not None and n < len(ds):
        ds = subsample(ds, n, seed)
    return ds
