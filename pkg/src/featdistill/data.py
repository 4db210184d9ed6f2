"""Image datasets: IDX and CIFAR-binary ingestion, synthetic data, batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tensor import Tensor

TRAIN = "train"
TEST = "test"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32


class FormatError(ValueError):
    """A dataset file does not match its binary format."""


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [M, C, H, W]
    labels: np.ndarray  # int64 [M]
    num_classes: int
    split: str = TRAIN

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError("images must be a uint8 array of shape [M, C, H, W]")
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in (TRAIN, TEST):
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.images.shape

    def subset(self, index, split: str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.images[index], self.labels[index], self.num_classes, split or self.split
        )


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_header(raw: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise FormatError(f"{path}: header truncated at byte offset {len(raw)} (need {need})")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at byte offset 0, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:need])
    expected = need + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(f"{path}: data truncated at byte offset {len(raw)}, expected {expected} bytes")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes at byte offset {expected}")
    return dims


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = TRAIN) -> Dataset:
    """Read an IDX image/label file pair (optionally gzip-compressed)."""
    raw_img = _read_bytes(images_path)
    raw_lab = _read_bytes(labels_path)
    m, h, w = _idx_header(raw_img, images_path, IDX_IMAGES_MAGIC, 3)
    (n,) = _idx_header(raw_lab, labels_path, IDX_LABELS_MAGIC, 1)
    if n != m:
        raise FormatError(
            f"{labels_path}: label count {n} at byte offset 4 does not match image count {m}"
        )
    images = np.frombuffer(raw_img, dtype=np.uint8, offset=16).reshape(m, 1, h, w).copy()
    labels = np.frombuffer(raw_lab, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images, labels, num_classes, split)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    m, c, h, w = ds.images.shape
    if c != 1:
        raise ValueError("IDX image files hold single-channel images")
    if ds.labels.max() > 255:
        raise ValueError("IDX label files hold byte labels")
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, m, h, w) + ds.images.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, m) + ds.labels.astype(np.uint8).tobytes()
    )


# ---------------------------------------------------------------------------
# CIFAR binary


def load_cifar_binary(paths, label_bytes: int = 1, num_classes: int | None = None, split: str = TRAIN) -> Dataset:
    """Read CIFAR-10 (``label_bytes=1``) or CIFAR-100 (``label_bytes=2``, fine label) records."""
    if label_bytes not in (1, 2):
        raise ValueError("label_bytes must be 1 (CIFAR-10) or 2 (CIFAR-100)")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    record = label_bytes + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % record:
            full = len(raw) // record * record
            raise FormatError(
                f"{path}: length {len(raw)} is not a multiple of the {record}-byte record; "
                f"partial record at byte offset {full}"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels.append(arr[:, label_bytes - 1].astype(np.int64))
        images.append(arr[:, label_bytes:].reshape(-1, 3, 32, 32))
    if num_classes is None:
        num_classes = 10 if label_bytes == 1 else 100
    return Dataset(np.concatenate(images), np.concatenate(labels), num_classes, split)


def write_cifar_binary(ds: Dataset, path, label_bytes: int = 1, coarse_labels=None) -> None:
    if ds.images.shape[1:] != (3, 32, 32):
        raise ValueError("CIFAR records hold 3x32x32 images")
    cols = []
    if label_bytes == 2:
        coarse = np.zeros(len(ds), np.uint8) if coarse_labels is None else np.asarray(coarse_labels, np.uint8)
        cols.append(coarse[:, None])
    cols.append(ds.labels.astype(np.uint8)[:, None])
    cols.append(ds.images.reshape(len(ds), -1))
    Path(path).write_bytes(np.concatenate(cols, axis=1).tobytes())


# ---------------------------------------------------------------------------
# synthetic data and splits


def synth_blobs(
    num_classes: int,
    per_class: int,
    image_size: int,
    seed: int,
    channels: int = 1,
    noise: float = 0.35,
) -> Dataset:
    """Class-conditional smooth textures plus pixel noise.

    Class ``k`` has a fixed low-frequency mean pattern; each sample adds white
    noise and a random brightness offset.
    """
    if min(num_classes, per_class, image_size, channels) < 1:
        raise ValueError("all sizes must be positive")
    rng = np.random.default_rng(seed)
    coarse = max(2, image_size // 4)
    protos = rng.normal(size=(num_classes, channels, coarse, coarse))
    # bilinear-ish upsampling by repetition then box blur keeps patterns smooth
    reps = -(-image_size // coarse)
    protos = np.repeat(np.repeat(protos, reps, axis=2), reps, axis=3)[:, :, :image_size, :image_size]
    k = np.ones(3) / 3.0
    for axis in (2, 3):
        protos = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), axis, protos)
    protos /= protos.std(axis=(1, 2, 3), keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    rng.shuffle(labels)
    x = protos[labels] + noise * rng.normal(size=(len(labels), channels, image_size, image_size))
    x += 0.2 * rng.normal(size=(len(labels), 1, 1, 1))
    images = np.clip(np.round(128.0 + 40.0 * x), 0, 255).astype(np.uint8)
    return Dataset(images, labels, num_classes, TRAIN)


def train_test_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split; returns ``(train, test)``."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        rng.shuffle(idx)
        test_idx.append(idx[: int(round(len(idx) * test_fraction))])
    test_mask = np.zeros(len(ds), bool)
    test_mask[np.concatenate(test_idx)] = True
    return ds.subset(np.flatnonzero(~test_mask), TRAIN), ds.subset(np.flatnonzero(test_mask), TEST)


def export_mnist_subset(out_dir, test_per_class: int = 100, seed: int = 0) -> dict[str, Path]:
    """Write the 5000-digit MNIST sample bundled with mlxtend as IDX train/test files.

    Returns the four file paths keyed ``train_images``, ``train_labels``,
    ``test_images``, ``test_labels``.  Existing files are reused.
    """
    out = Path(out_dir)
    paths = {
        "train_images": out / "train-images-idx3-ubyte",
        "train_labels": out / "train-labels-idx1-ubyte",
        "test_images": out / "t5k-images-idx3-ubyte",
        "test_labels": out / "t5k-labels-idx1-ubyte",
    }
    if all(p.exists() for p in paths.values()):
        return paths
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    full = Dataset(X.reshape(-1, 1, 28, 28).astype(np.uint8), y, 10)
    per_class = np.bincount(y, minlength=10)
    train, test = train_test_split(full, test_per_class / per_class.min(), seed)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(train, paths["train_images"], paths["train_labels"])
    write_idx(test, paths["test_images"], paths["test_labels"])
    return paths


# ---------------------------------------------------------------------------
# normalization and batching


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 64
    shuffle_seed: int = 0
    drop_last: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset) -> "ChannelStats":
        if ds.split != TRAIN:
            raise ValueError("normalization statistics must come from the training split")
        x = ds.images.astype(np.float64)
        std = x.std(axis=(0, 2, 3))
        return cls(x.mean(axis=(0, 2, 3)), np.where(std > 0, std, 1.0))

    def transform(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        return (x - self.mean.reshape(1, -1, 1, 1)) / self.std.reshape(1, -1, 1, 1)


def epoch_order(n: int, plan: BatchPlan, epoch: int) -> np.ndarray:
    if not plan.shuffle:
        return np.arange(n)
    return np.random.default_rng([plan.shuffle_seed, epoch]).permutation(n)


def augment_batch(
    images: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True
) -> np.ndarray:
    """Random ``pad``-pixel translation crop and (optionally) horizontal flip, per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flips = (rng.random(n) < 0.5) & flip
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def normalize_and_batch(
    ds: Dataset,
    plan: BatchPlan,
    augment: bool = False,
    stats: ChannelStats | None = None,
    epoch: int = 0,
    pad: int = 4,
    flip: bool = True,
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield ``(normalized images, labels)`` batches for one epoch.

    Test splits need ``stats`` fitted on the training split.  Augmentation is
    only ever applied to training splits.
    """
    if stats is None:
        stats = ChannelStats.fit(ds)
    order = epoch_order(len(ds), plan, epoch)
    aug_rng = np.random.default_rng([plan.shuffle_seed, epoch, 1])
    do_aug = augment and ds.split == TRAIN
    for start in range(0, len(order), plan.batch_size):
        idx = order[start : start + plan.batch_size]
        if plan.drop_last and len(idx) < plan.batch_size:
            break
        imgs = ds.images[idx]
        if do_aug:
            imgs = augment_batch(imgs, aug_rng, pad, flip)
        yield Tensor._wrap(stats.transform(imgs)), ds.labels[idx]
