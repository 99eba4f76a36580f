"""MNIST / CIFAR-10 ingestion, one-vs-others tasks and stratified batching."""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, LengthError, TaskError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


@dataclass
class ImageDataset:
    images: np.ndarray  # (n, c, h, w), values in [0, 1]
    labels: np.ndarray  # int64 digits 0-9
    split: str = "train"
    digest: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "ImageDataset":
        return ImageDataset(self.images[:n], self.labels[:n], self.split, self.digest)


@dataclass
class BinaryTask:
    positive_digit: int
    images: np.ndarray
    labels: np.ndarray  # +1 for the positive digit, -1 otherwise
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_index(self) -> np.ndarray:
        """Two-class index used by logits: 0 for positives, 1 for negatives."""
        return np.where(self.labels > 0, 0, 1)


def _read_idx(raw: bytes, magic: int, what: str) -> tuple[tuple[int, ...], np.ndarray]:
    if len(raw) < 4:
        raise LengthError(f"{what}: file shorter than its header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = got & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError(f"{what}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise LengthError(f"{what}: payload has {len(raw) - header} bytes, header promises {count}")
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header)


def parse_idx_images(raw: bytes) -> np.ndarray:
    dims, payload = _read_idx(raw, IDX_IMAGES_MAGIC, "idx images")
    n, h, w = dims
    return (payload.reshape(n, 1, h, w) / 255.0).astype(np.float64)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    _, payload = _read_idx(raw, IDX_LABELS_MAGIC, "idx labels")
    return payload.astype(np.int64)


def encode_idx_images(images: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx_images` for images that are exact multiples of 1/255."""
    n, _, h, w = images.shape
    body = np.rint(images * 255.0).astype(np.uint8).tobytes()
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + body


def encode_idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + np.asarray(labels, np.uint8).tobytes()


def load_mnist_idx(images_path, labels_path, split: str = "train") -> ImageDataset:
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    digest = hashlib.sha256(img_raw + lab_raw).hexdigest()[:16]
    return ImageDataset(parse_idx_images(img_raw), parse_idx_labels(lab_raw), split, digest)


def parse_cifar10(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise LengthError(f"cifar batch of {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = (rec[:, 1:].reshape(-1, 3, 32, 32) / 255.0).astype(np.float64)
    return images, labels


def encode_cifar10(images: np.ndarray, labels: np.ndarray) -> bytes:
    pix = np.rint(images * 255.0).astype(np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, np.uint8)[:, None], pix], axis=1)
    return rec.tobytes()


def load_cifar10_bin(batch_paths: Sequence, split: str = "train") -> ImageDataset:
    images, labels, h = [], [], hashlib.sha256()
    for p in batch_paths:
        raw = Path(p).read_bytes()
        h.update(raw)
        im, lb = parse_cifar10(raw)
        images.append(im)
        labels.append(lb)
    return ImageDataset(np.concatenate(images), np.concatenate(labels), split, h.hexdigest()[:16])


def data_root(explicit=None) -> Path:
    root = explicit or os.environ.get("MPMNET_DATA_DIR")
    if not root:
        raise FileNotFoundError("no dataset root; pass a path or set MPMNET_DATA_DIR")
    return Path(root)


def load_dataset(kind: str, split: str, root=None) -> ImageDataset:
    """Load a standard split from ``root`` (or ``$MPMNET_DATA_DIR``).

    MNIST files are looked up in ``root`` or ``root/mnist``; CIFAR-10 batches
    in ``root``, ``root/cifar10`` or ``root/cifar-10-batches-bin``.
    """
    base = data_root(root)
    if kind == "mnist":
        names = MNIST_FILES[split]
        for d in (base, base / "mnist"):
            if (d / names[0]).exists():
                return load_mnist_idx(d / names[0], d / names[1], split)
        raise FileNotFoundError(f"MNIST {split} files not found under {base}")
    if kind == "cifar10":
        names = CIFAR_FILES[split]
        for d in (base, base / "cifar10", base / "cifar-10-batches-bin"):
            if (d / names[0]).exists():
                return load_cifar10_bin([d / n for n in names], split)
        raise FileNotFoundError(f"CIFAR-10 {split} batches not found under {base}")
    raise TaskError(f"unknown dataset kind {kind!r}")


def make_binary_task(ds, positive_digit: int) -> BinaryTask:
    if not 0 <= positive_digit <= 9:
        raise TaskError(f"positive digit must be in 0..9, got {positive_digit}")
    labels = ds.labels
    if isinstance(ds, BinaryTask):
        # already relabelled; idempotent when the digit matches
        if ds.positive_digit != positive_digit:
            raise TaskError("cannot relabel a binary task for a different digit")
        return ds
    pos = labels == positive_digit
    if not pos.any():
        raise TaskError(f"digit {positive_digit} absent from the {ds.split} split")
    if pos.all():
        raise TaskError(f"{ds.split} split has no negatives for digit {positive_digit}")
    return BinaryTask(positive_digit, ds.images, np.where(pos, 1, -1).astype(np.int64), ds.split)


@dataclass
class StratifiedBatcher:
    """Mini-batches that always contain at least two samples of each class.

    ``balanced`` (the default) fills half of every batch with positives,
    resampling the minority class as needed, so that an epoch covers each
    majority-class sample exactly once. ``natural`` keeps the class ratio of
    the task but still guarantees two samples per class.
    """

    labels: np.ndarray
    batch_size: int
    seed: int = 0
    composition: str = "balanced"
    _epoch: int = field(default=0, init=False)

    def __post_init__(self):
        if self.batch_size < 4:
            raise TaskError("batch size must be at least 4")
        if self.composition not in ("balanced", "natural"):
            raise TaskError(f"unknown batch composition {self.composition!r}")
        self.labels = np.asarray(self.labels)
        self.pos = np.flatnonzero(self.labels > 0)
        self.neg = np.flatnonzero(self.labels <= 0)
        if len(self.pos) < 2 or len(self.neg) < 2:
            raise TaskError("each class needs at least 2 samples")

    def epoch(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.seed, epoch])
        if self.composition == "balanced":
            return self._balanced(rng)
        return self._natural(rng)

    def _balanced(self, rng) -> list[np.ndarray]:
        major, minor = (self.neg, self.pos) if len(self.neg) >= len(self.pos) else (self.pos, self.neg)
        half = self.batch_size // 2
        n_major = self.batch_size - half
        major = rng.permutation(major)
        n_batches = -(-len(major) // n_major)
        reps = -(-(n_batches * half) // len(minor))
        minor_stream = np.concatenate([rng.permutation(minor) for _ in range(reps)])
        batches = []
        for b in range(n_batches):
            mj = major[b * n_major:(b + 1) * n_major]
            if len(mj) < 2:
                # top up a short tail with already-seen majority samples
                mj = np.concatenate([mj, major[:2 - len(mj)]])
            mn = minor_stream[b * half:(b + 1) * half]
            batches.append(rng.permutation(np.concatenate([mj, mn])))
        return batches

    def _natural(self, rng) -> list[np.ndarray]:
        order = rng.permutation(len(self.labels))
        n_batches = max(1, len(order) // self.batch_size)
        batches = []
        for chunk in np.array_split(order, n_batches):
            y = self.labels[chunk]
            for cls_idx, need in ((self.pos, (y > 0).sum()), (self.neg, (y <= 0).sum())):
                if need < 2:
                    extra = rng.choice(np.setdiff1d(cls_idx, chunk), 2 - need, replace=False)
                    chunk = np.concatenate([chunk, extra])
            batches.append(chunk)
        return batches

    def __iter__(self) -> Iterator[np.ndarray]:
        batches = self.epoch(self._epoch)
        self._epoch += 1
        return iter(batches)


def stratified_batches(task, batch_size: int, seed: int, composition: str = "balanced",
                       epoch: int = 0) -> list[np.ndarray]:
    labels = task.labels if hasattr(task, "labels") else np.asarray(task)
    return StratifiedBatcher(labels, batch_size, seed, composition).epoch(epoch)
