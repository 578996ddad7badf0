"""Dataset ingestion, synthesis, normalization and batching.

IDX is the only on-disk format: big-endian, magic 0x00000803 for image files
(dims n,h,w, unsigned-byte pixels) and 0x00000801 for label files. Synthetic
datasets are class-conditional Gaussian blobs, reproducible from their seed,
and exist so end-to-end runs stay fast.
"""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .routing import TargetBatch
from .tensor import ClassCountError

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """An IDX file does not match the expected byte layout."""


class ConsistencyError(ValueError):
    """Two inputs that must describe the same samples disagree."""


class DegenerateDataError(ValueError):
    """The data has no variance where some is required."""


@dataclass
class DatasetSplit:
    """Images [n, channels, height, width] in float64 plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    normalized: bool = False

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [n,c,h,w], got {self.images.shape}")
        n = self.images.shape[0]
        if n < 1:
            raise ValueError("a split needs at least one sample")
        if self.labels.shape != (n,):
            raise ConsistencyError(
                f"{n} images but {self.labels.shape} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ConsistencyError(
                f"labels must lie in [0, {self.class_count}), found "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int) -> "DatasetSplit":
        """First n samples, preserving order."""
        return DatasetSplit(
            self.images[:n].copy(), self.labels[:n].copy(), self.class_count, self.normalized
        )


@dataclass
class NormalizationStats:
    """Per-channel mean and standard deviation of a training split."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std must have one entry per channel")
        if (self.std <= 0).any():
            raise DegenerateDataError("standard deviation must be positive")


def _read_header(blob: bytes, path, expected_magic: int, n_dims: int) -> tuple:
    header = 4 * (1 + n_dims)
    if len(blob) < header:
        raise IdxFormatError(f"{path}: file ends inside the header")
    fields = struct.unpack(f">{1 + n_dims}I", blob[:header])
    if fields[0] != expected_magic:
        raise IdxFormatError(
            f"{path}: magic 0x{fields[0]:08x}, expected 0x{expected_magic:08x}"
        )
    return fields[1:], blob[header:]


def load_idx(images_path, labels_path, class_count: Optional[int] = None) -> DatasetSplit:
    """Parse an IDX image/label file pair into a DatasetSplit.

    Pixels are scaled to [0, 1]. When ``class_count`` is given, labels are
    checked against it; otherwise it is inferred as max(label) + 1.
    """
    with open(images_path, "rb") as fh:
        (n, h, w), pixels = _read_header(fh.read(), images_path, _IMAGE_MAGIC, 3)
    if len(pixels) < n * h * w:
        raise IdxFormatError(
            f"{images_path}: expected {n * h * w} pixel bytes, found {len(pixels)}"
        )
    images = np.frombuffer(pixels[: n * h * w], dtype=np.uint8).reshape(n, 1, h, w)

    with open(labels_path, "rb") as fh:
        (n_labels,), raw = _read_header(fh.read(), labels_path, _LABEL_MAGIC, 1)
    if len(raw) < n_labels:
        raise IdxFormatError(
            f"{labels_path}: expected {n_labels} label bytes, found {len(raw)}"
        )
    labels = np.frombuffer(raw[:n_labels], dtype=np.uint8).astype(np.int64)

    if n_labels != n:
        raise ConsistencyError(f"{n} images but {n_labels} labels")
    inferred = int(labels.max()) + 1 if n else 0
    if class_count is None:
        class_count = inferred
    elif inferred > class_count:
        raise ConsistencyError(
            f"label {labels.max()} out of range for a {class_count}-class set"
        )
    return DatasetSplit(images.astype(np.float64) / 255.0, labels, class_count)


def write_idx(split: DatasetSplit, images_path, labels_path) -> None:
    """Write a split back out as an IDX pair (pixels quantized to bytes)."""
    n, c, h, w = split.images.shape
    if c != 1:
        raise ValueError("IDX image files are single-channel")
    pixels = np.clip(np.rint(split.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IMAGE_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", _LABEL_MAGIC, n))
        fh.write(split.labels.astype(np.uint8).tobytes())


def synth_dataset(
    classes: int,
    per_class: int,
    geometry: tuple = (1, 8, 8),
    seed: int = 0,
    noise: float = 0.1,
    jitter: float = 0.0,
) -> DatasetSplit:
    """Class-conditional Gaussian-blob images, deterministic from the seed.

    Each class owns a blob template centered on a ring; ``jitter`` moves the
    center per sample and ``noise`` adds pixel noise, so difficulty is
    tunable from trivially separable (both zero) upward.
    """
    if classes < 2:
        raise ClassCountError(f"need at least 2 classes, got {classes}")
    c, h, w = geometry
    rng = np.random.default_rng((int(seed),))
    angles = 2.0 * np.pi * np.arange(classes) / classes
    centers_y = h / 2.0 + 0.30 * h * np.sin(angles)
    centers_x = w / 2.0 + 0.30 * w * np.cos(angles)
    sigma = max(h, w) / 6.0

    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    cy = centers_y[labels] + rng.normal(0.0, jitter, n)
    cx = centers_x[labels] + rng.normal(0.0, jitter, n)
    ys = np.arange(h)[None, :, None]
    xs = np.arange(w)[None, None, :]
    blobs = np.exp(
        -((ys - cy[:, None, None]) ** 2 + (xs - cx[:, None, None]) ** 2)
        / (2.0 * sigma**2)
    )
    images = np.repeat(blobs[:, None, :, :], c, axis=1)
    if noise > 0:
        images = images + rng.normal(0.0, noise, images.shape)
    return DatasetSplit(np.clip(images, 0.0, 1.0), labels, classes)


def normalize(
    split: DatasetSplit, stats: Optional[NormalizationStats] = None
) -> tuple[DatasetSplit, NormalizationStats]:
    """Shift/scale each channel to zero mean and unit variance.

    Without ``stats`` the split's own statistics are used (training data);
    with ``stats`` the given training statistics are applied (test data).
    Re-normalizing an already normalized split is a contract violation.
    """
    if split.normalized:
        raise ConsistencyError("split is already normalized; normalize raw data only")
    if stats is None:
        mean = split.images.mean(axis=(0, 2, 3))
        std = split.images.std(axis=(0, 2, 3))
        if (std == 0).any():
            raise DegenerateDataError(
                "at least one channel is constant; cannot scale to unit variance"
            )
        stats = NormalizationStats(mean=mean, std=std)
    images = (split.images - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return (
        DatasetSplit(images, split.labels.copy(), split.class_count, normalized=True),
        stats,
    )


def batches(
    split: DatasetSplit,
    batch_size: int,
    seed: int = 0,
    shuffle: bool = True,
    epoch: int = 0,
    prefetch: int = 0,
) -> Iterator[tuple[np.ndarray, TargetBatch]]:
    """Yield (images, targets) batches; the final short batch is included.

    The order is a pure function of (seed, epoch). With ``prefetch`` > 0 a
    helper thread prepares batches ahead through a bounded queue; the order
    is unchanged.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    if shuffle:
        order = np.random.default_rng((int(seed), int(epoch))).permutation(n)
    else:
        order = np.arange(n)

    def produce() -> Iterator[tuple[np.ndarray, TargetBatch]]:
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            yield (
                split.images[sel],
                TargetBatch.from_labels(split.labels[sel], split.class_count),
            )

    if prefetch <= 0:
        return produce()

    def consume() -> Iterator[tuple[np.ndarray, TargetBatch]]:
        q: queue.Queue = queue.Queue(maxsize=prefetch)
        done = object()

        def worker():
            for item in produce():
                q.put(item)
            q.put(done)

        threading.Thread(target=worker, daemon=True).start()
        while True:
            item = q.get()
            if item is done:
                return
            yield item

    return consume()
