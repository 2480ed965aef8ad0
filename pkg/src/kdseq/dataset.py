"""Synthetic classification sets, IDX ingestion and seeded mini-batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on the number of examples")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def _check_counts(classes, per_class):
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")


def make_spirals(seed: int, classes: int, per_class: int, noise_std: float,
                 turns: float = 0.75, radius: float = 1.0) -> Dataset:
    """Interleaved 2-D spiral arms, one per class.

    Arm ``c`` is the curve ``r = radius (0.2 + 0.8 t)``,
    ``theta = 2 pi (c / classes + turns t)`` sampled at evenly spaced ``t`` in
    [0, 1], plus isotropic Gaussian noise with std ``noise_std * radius``.
    """
    _check_counts(classes, per_class)
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, per_class)
    r = radius * (0.2 + 0.8 * t)
    xs, ys = [], []
    for c in range(classes):
        theta = 2 * np.pi * (c / classes + turns * t)
        xs.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
        ys.append(np.full(per_class, c, dtype=np.int64))
    x = np.concatenate(xs)
    if noise_std > 0:
        x = x + rng.normal(0.0, noise_std * radius, size=x.shape)
    return Dataset("spirals", np.ascontiguousarray(x), np.concatenate(ys), classes)


def make_blobs(seed: int, classes: int, per_class: int, spread: float, dim: int = 2,
               box: float = 10.0, sample_seed: int | None = None) -> Dataset:
    """Gaussian clusters around centers drawn uniformly from ``[-box, box]^dim``.

    Centers depend on ``seed`` only; pass a ``sample_seed`` to draw a fresh
    sample (e.g. a test split) around the same centers.
    """
    _check_counts(classes, per_class)
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-box, box, size=(classes, dim))
    if sample_seed is not None:
        rng = np.random.default_rng([seed, sample_seed])
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    x = centers[labels]
    if spread > 0:
        x = x + rng.normal(0.0, spread, size=x.shape)
    return Dataset("blobs", np.ascontiguousarray(x), labels, classes)


def _read_header(buf: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise IdxTruncatedError(f"{path}: header needs {need} bytes, file has {len(buf)}")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndim}I", buf, 4)


def load_idx(images_path, labels_path, name: str | None = None) -> Dataset:
    """Read an unsigned-byte IDX image/label pair; pixels are scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    ibuf, lbuf = images_path.read_bytes(), labels_path.read_bytes()

    n_img, rows, cols = _read_header(ibuf, images_path, IMAGE_MAGIC, 3)
    pixels = n_img * rows * cols
    if len(ibuf) - 16 < pixels:
        raise IdxTruncatedError(f"{images_path}: expected {pixels} pixel bytes, found {len(ibuf) - 16}")
    (n_lab,) = _read_header(lbuf, labels_path, LABEL_MAGIC, 1)
    if len(lbuf) - 8 < n_lab:
        raise IdxTruncatedError(f"{labels_path}: expected {n_lab} label bytes, found {len(lbuf) - 8}")
    if n_img != n_lab:
        raise IdxCountMismatchError(f"{n_img} images but {n_lab} labels")

    x = np.frombuffer(ibuf, dtype=np.uint8, count=pixels, offset=16)
    x = x.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(lbuf, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    classes = int(y.max()) + 1 if y.size else 0
    return Dataset(name or images_path.stem, x, y, classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images ``[N, rows, cols]`` and labels ``[N]`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", LABEL_MAGIC, labels.shape[0]) + labels.tobytes())


def epoch_order(n: int, base_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([base_seed, epoch]).permutation(n)


def batches(ds: Dataset, batch_size: int, base_seed: int, epoch: int
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffle once per epoch and yield ``(features, labels)`` mini-batches.

    The last batch may be smaller than ``batch_size``; every example appears
    exactly once per epoch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(ds), base_seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.features[idx], ds.labels[idx]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)
