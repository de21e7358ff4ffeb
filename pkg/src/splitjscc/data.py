"""CIFAR-100 binary loader, a synthetic stand-in dataset, augmentation and batching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import make_rng

CIFAR_RECORD = 3074  # coarse label, fine label, 3072 pixels
PIXELS = 3 * 32 * 32
SPWD_MAGIC = b"SPWD1"


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, 32, 32) in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int
    split_tag: str = "train"
    channel_stats: tuple[np.ndarray, np.ndarray] | None = None
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} do not match")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def with_stats(self, stats: tuple[np.ndarray, np.ndarray]) -> "Dataset":
        return replace(self, channel_stats=stats)

    def normalized(self, idx=None) -> np.ndarray:
        images = self.images if idx is None else self.images[idx]
        return normalize(images, self.channel_stats)


@dataclass
class AugmentConfig:
    pad: int = 4
    crop: int = 32
    hflip_prob: float = 0.5
    normalize: bool = True

    def __post_init__(self):
        if self.crop > 32 + 2 * self.pad:
            raise ValueError(f"crop {self.crop} larger than padded size {32 + 2 * self.pad}")


# -- CIFAR-100 ------------------------------------------------------------------


def parse_cifar_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split raw bytes into (images in [0, 1], coarse labels, fine labels)."""
    if len(raw) % CIFAR_RECORD:
        offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise IOError(f"{source}: truncated record at byte offset {offset} (size {len(raw)} not a multiple of {CIFAR_RECORD})")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    images = rec[:, 2:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, rec[:, 0].astype(np.int64), rec[:, 1].astype(np.int64)


def to_cifar_records(ds: Dataset) -> bytes:
    """Inverse of :func:`parse_cifar_records` for datasets holding 8-bit pixel values."""
    n = len(ds)
    coarse = ds.coarse_labels if ds.coarse_labels is not None else np.zeros(n, dtype=np.int64)
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = coarse
    rec[:, 1] = ds.labels
    rec[:, 2:] = np.rint(ds.images.reshape(n, PIXELS) * 255.0).astype(np.uint8)
    return rec.tobytes()


def _read_cifar_file(path: Path, split_tag: str) -> Dataset:
    if not path.exists():
        raise FileNotFoundError(f"CIFAR-100 file not found: {path}")
    images, coarse, fine = parse_cifar_records(path.read_bytes(), str(path))
    return Dataset(images, fine, 100, split_tag, coarse_labels=coarse)


def load_cifar100(path: str | os.PathLike) -> tuple[Dataset, Dataset]:
    """Load ``train.bin``/``test.bin`` from ``path`` (or its ``cifar-100-binary`` subdirectory).

    Fine labels are used; normalization statistics come from the train split.
    """
    root = Path(path)
    if not (root / "train.bin").exists() and (root / "cifar-100-binary").is_dir():
        root = root / "cifar-100-binary"
    train = _read_cifar_file(root / "train.bin", "train")
    test = _read_cifar_file(root / "test.bin", "test")
    stats = channel_stats(train)
    return train.with_stats(stats), test.with_stats(stats)


# -- synthetic data -------------------------------------------------------------


def _class_templates(class_count: int, seed: int, n_blobs: int = 3):
    rng = make_rng(seed, "templates")
    centers = rng.uniform(6, 26, size=(class_count, n_blobs, 2))
    widths = rng.uniform(2.5, 5.0, size=(class_count, n_blobs))
    colors = rng.uniform(0.0, 1.0, size=(class_count, n_blobs, 3))
    background = rng.uniform(0.1, 0.4, size=(class_count, 3))
    return centers, widths, colors, background


def synthetic_dataset(class_count: int, n_per_class: int, seed: int = 0, split_tag: str = "train") -> Dataset:
    """Class-conditional images made of colored Gaussian blobs.

    Each class has fixed blob positions, sizes and colors (shared between
    splits for a given ``seed``); every image jitters the blob positions and
    amplitudes and adds pixel noise.  Pixels are quantized to 8 bits so the
    dataset survives the byte-level cache format unchanged.
    """
    if class_count < 2:
        raise ValueError("class_count must be at least 2")
    if class_count > 256:
        raise ValueError("class_count must fit in one byte")
    centers, widths, colors, background = _class_templates(class_count, seed)
    rng = make_rng(seed, "data" if split_tag == "train" else "test_data")

    n = class_count * n_per_class
    labels = np.repeat(np.arange(class_count), n_per_class)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    images = np.empty((n, 3, 32, 32))
    jitter = rng.normal(0.0, 1.5, size=(n, centers.shape[1], 2))
    amp = rng.uniform(0.7, 1.0, size=(n, centers.shape[1]))
    noise = rng.normal(0.0, 0.08, size=(n, 3, 32, 32))
    for i, c in enumerate(labels):
        img = np.broadcast_to(background[c][:, None, None], (3, 32, 32)).copy()
        for b in range(centers.shape[1]):
            cy, cx = centers[c, b] + jitter[i, b]
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * widths[c, b] ** 2))
            img += amp[i, b] * colors[c, b][:, None, None] * blob
        images[i] = img
    images = np.clip(images + noise, 0.0, 1.0)
    images = np.rint(images * 255.0) / 255.0
    return Dataset(images, labels.astype(np.int64), class_count, split_tag)


def save_spwd(ds: Dataset, path: str | os.PathLike) -> None:
    """Cache format: b"SPWD1", class_count and N as uint32 LE, then N records of label byte + 3072 pixel bytes."""
    n = len(ds)
    rec = np.empty((n, 1 + PIXELS), dtype=np.uint8)
    rec[:, 0] = ds.labels
    rec[:, 1:] = np.rint(ds.images.reshape(n, PIXELS) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(SPWD_MAGIC + struct.pack("<II", ds.class_count, n))
        fh.write(rec.tobytes())


def load_spwd(path: str | os.PathLike, split_tag: str = "train") -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:5] != SPWD_MAGIC:
        raise IOError(f"{path}: bad magic {raw[:5]!r}")
    class_count, n = struct.unpack("<II", raw[5:13])
    body = raw[13:]
    if len(body) != n * (1 + PIXELS):
        raise IOError(f"{path}: expected {n} records, body has {len(body)} bytes")
    rec = np.frombuffer(body, dtype=np.uint8).reshape(n, 1 + PIXELS)
    images = rec[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, rec[:, 0].astype(np.int64), class_count, split_tag)


# -- preprocessing -----------------------------------------------------------------


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over all pixels of ``ds``."""
    return ds.images.mean(axis=(0, 2, 3)), ds.images.std(axis=(0, 2, 3))


def normalize(images: np.ndarray, stats: tuple[np.ndarray, np.ndarray] | None) -> np.ndarray:
    if stats is None:
        return images
    mean, std = stats
    return (images - mean[None, :, None, None]) / std[None, :, None, None]


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def pad_crop(images: np.ndarray, pad: int, offsets: np.ndarray, crop: int = 32) -> np.ndarray:
    """Zero-pad by ``pad`` on each side, then cut a ``crop`` tile at per-image (row, col) ``offsets``."""
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(padded, (crop, crop), axis=(2, 3))
    return win[np.arange(images.shape[0]), :, offsets[:, 0], offsets[:, 1]].copy()


def augment(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, stats=None) -> np.ndarray:
    """Random pad-and-crop, random horizontal flip, then per-channel normalization."""
    n = images.shape[0]
    span = images.shape[-1] + 2 * cfg.pad - cfg.crop + 1
    offsets = rng.integers(0, span, size=(n, 2))
    out = pad_crop(images, cfg.pad, offsets, cfg.crop)
    flip = rng.random(n) < cfg.hflip_prob
    out[flip] = out[flip][..., ::-1]
    return normalize(out, stats) if cfg.normalize else out


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None = None, rng=None) -> Iterator[np.ndarray]:
    """Index batches over ``range(n)``; shuffled by ``rng`` or a generator seeded from ``shuffle_seed``."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if rng is None and shuffle_seed is not None:
        rng = make_rng(shuffle_seed, "shuffle")
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels); the last partial batch is kept."""
    for idx in batch_indices(len(ds), batch_size, shuffle_seed):
        yield ds.images[idx], ds.labels[idx]
