"""Datasets: a deterministic synthetic generator for desk-scale runs plus
readers for the published MNIST (IDX) and CIFAR-10 (binary batch) formats.

Images are kept as uint8-valued reals in [0, 255]; no demeaning or
normalization is applied anywhere in the pipeline.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DatasetError",
    "Batch",
    "ArrayDataset",
    "make_blobs",
    "load_mnist",
    "load_cifar10",
    "load_dataset",
]


class DatasetError(ValueError):
    """Dataset missing, malformed, or empty."""


@dataclass
class Batch:
    """One minibatch: NxCxHxW images in [0, 255] and integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"batch images must be 4-D, got {self.images.shape}")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 255.0:
            raise DatasetError(f"image values outside [0, 255]: min {lo}, max {hi}")


class ArrayDataset:
    """In-memory dataset of images (float32, 0..255) and int labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        if len(images) != len(labels):
            raise DatasetError("images and labels disagree in length")
        self.images = images.astype(np.float32, copy=False)
        self.labels = labels.astype(np.int64, copy=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _upsample_nearest(coarse: np.ndarray, size: int) -> np.ndarray:
    factor = size // coarse.shape[-1]
    return np.kron(coarse, np.ones((1, factor, factor)))


def make_blobs(
    n_train: int = 1280,
    n_val: int = 320,
    image_size: int = 32,
    channels: int = 3,
    classes: int = 10,
    seed: int = 0,
    contrast: float = 28.0,
    noise: float = 60.0,
) -> tuple[ArrayDataset, ArrayDataset]:
    """Deterministic synthetic image classes: coarse random templates plus
    per-sample Gaussian noise, clipped and rounded to the uint8 range.

    Generation depends only on the arguments, never on global RNG state,
    so two runs with the same seed see byte-identical data.
    """
    if n_train % classes or n_val % classes:
        raise DatasetError("sample counts must be divisible by the class count")
    rng = np.random.default_rng([seed, 0xB10B5])
    grid = max(image_size // 8, 2)
    templates = []
    for _ in range(classes):
        coarse = rng.standard_normal((channels, grid, grid))
        templates.append(128.0 + contrast * _upsample_nearest(coarse, image_size))

    def draw(count_per_class: int):
        images = np.empty(
            (count_per_class * classes, channels, image_size, image_size),
            dtype=np.float32,
        )
        labels = np.empty(count_per_class * classes, dtype=np.int64)
        i = 0
        for cls in range(classes):
            for _ in range(count_per_class):
                sample = templates[cls] + noise * rng.standard_normal(
                    (channels, image_size, image_size)
                )
                images[i] = np.clip(np.rint(sample), 0.0, 255.0)
                labels[i] = cls
                i += 1
        order = rng.permutation(len(labels))
        return ArrayDataset(images[order], labels[order])

    return draw(n_train // classes), draw(n_val // classes)


# -- published binary formats ----------------------------------------------


def _open_maybe_gz(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        magic = struct.unpack(">I", fh.read(4))[0]
        kind = (magic >> 8) & 0xFF
        ndim = magic & 0xFF
        if kind != 0x08:
            raise DatasetError(f"{path}: unsupported IDX element type {kind:#x}")
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: payload length does not match header dims {dims}")
    return data.reshape(dims)


def _find_idx(directory: Path, stem: str) -> Path:
    for suffix in ("", ".gz"):
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    raise DatasetError(f"missing dataset file {stem} under {directory}")


def load_mnist(directory) -> tuple[ArrayDataset, ArrayDataset]:
    """Read the four IDX files (optionally gzipped) from a directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory not found: {directory}")
    out = []
    for split in ("train", "t10k"):
        images = _read_idx(_find_idx(directory, f"{split}-images-idx3-ubyte"))
        labels = _read_idx(_find_idx(directory, f"{split}-labels-idx1-ubyte"))
        out.append(
            ArrayDataset(
                images.reshape(-1, 1, 28, 28).astype(np.float32),
                labels.astype(np.int64),
            )
        )
    return out[0], out[1]


def load_cifar10(directory) -> tuple[ArrayDataset, ArrayDataset]:
    """Read CIFAR-10 binary batches (data_batch_*.bin, test_batch.bin)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory not found: {directory}")
    record = 1 + 3 * 32 * 32

    def read_batches(paths):
        images, labels = [], []
        for path in paths:
            raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
            if raw.size == 0 or raw.size % record:
                raise DatasetError(f"{path}: size {raw.size} not a whole batch")
            rows = raw.reshape(-1, record)
            labels.append(rows[:, 0].astype(np.int64))
            images.append(rows[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32))
        return ArrayDataset(np.concatenate(images), np.concatenate(labels))

    train_paths = sorted(directory.glob("data_batch_*.bin"))
    test_path = directory / "test_batch.bin"
    if not train_paths or not test_path.exists():
        raise DatasetError(f"no CIFAR-10 batch files under {directory}")
    return read_batches(train_paths), read_batches([test_path])


def load_dataset(name: str, path=None, seed: int = 0,
                 train_size: int = 1280, val_size: int = 320):
    """Dispatch on the dataset name used in run configs."""
    if name == "blobs32":
        return make_blobs(train_size, val_size, image_size=32, channels=3, seed=seed)
    if name == "blobs28":
        return make_blobs(train_size, val_size, image_size=28, channels=1, seed=seed)
    if name == "mnist":
        if path is None:
            raise DatasetError("mnist requires a dataset path")
        return load_mnist(path)
    if name == "cifar10":
        if path is None:
            raise DatasetError("cifar10 requires a dataset path")
        return load_cifar10(path)
    raise DatasetError(f"unknown dataset '{name}'")
