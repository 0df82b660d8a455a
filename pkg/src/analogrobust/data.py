"""Dataset ingestion, normalisation statistics, splits and interleaving."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, IngestionError
from .rng import rng_for

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # float32, N x C x H x W, pixels in [0, 1]
    labels: np.ndarray  # int64, N
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ArgumentError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ArgumentError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# ----------------------------------------------------------------------
# CIFAR-10 binary batches


def decode_cifar10_batch(blob: bytes, source: str = "<bytes>") -> Dataset:
    if len(blob) % CIFAR_RECORD:
        complete = len(blob) // CIFAR_RECORD
        raise IngestionError(f"{source}: truncated record {complete}", offset=complete * CIFAR_RECORD)
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise IngestionError(f"{source}: label {labels[bad[0]]} out of range", offset=int(bad[0]) * CIFAR_RECORD)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels)


def encode_cifar10_batch(ds: Dataset) -> bytes:
    pixels = np.round(ds.images * 255.0).astype(np.uint8).reshape(len(ds), -1)
    return np.concatenate([ds.labels.astype(np.uint8)[:, None], pixels], axis=1).tobytes()


def _concat(parts: list[Dataset]) -> Dataset:
    return Dataset(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), parts[0].num_classes
    )


def load_cifar10(path) -> tuple[Dataset, Dataset]:
    """Read the five training batches and the test batch from ``path``."""
    path = Path(path)
    parts = []
    for name in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]:
        f = path / name
        if not f.exists():
            raise IngestionError(f"missing CIFAR-10 batch {f}", offset=0)
        parts.append(decode_cifar10_batch(f.read_bytes(), str(f)))
    return _concat(parts[:-1]), parts[-1]


# ----------------------------------------------------------------------
# IDX (MNIST)

_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def decode_idx(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0 or blob[2] not in _IDX_TYPES:
        raise IngestionError(f"{source}: bad IDX magic", offset=0)
    ndim = blob[3]
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IngestionError(f"{source}: truncated IDX header", offset=len(blob))
    dims = [int.from_bytes(blob[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    dtype = np.dtype(_IDX_TYPES[blob[2]])
    need = header + int(np.prod(dims)) * dtype.itemsize
    if len(blob) < need:
        raise IngestionError(f"{source}: truncated IDX payload", offset=len(blob))
    return np.frombuffer(blob[header:need], dtype=dtype).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    head = bytes([0, 0, 0x08, arr.ndim]) + b"".join(int(d).to_bytes(4, "big") for d in arr.shape)
    return head + arr.tobytes()


def load_idx(images_path, labels_path) -> Dataset:
    images = decode_idx(Path(images_path).read_bytes(), str(images_path))
    labels = decode_idx(Path(labels_path).read_bytes(), str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise IngestionError("image and label files disagree on record count", offset=4)
    return Dataset(images[:, None].astype(np.float32) / 255.0, labels.astype(np.int64))


def load_mnist5k(desk: bool = True) -> Dataset:
    """The 5,000-image MNIST sample bundled with ``mlxtend`` (500 per class).

    ``desk=True`` crops a 2-pixel border to 24x24 and averages 2x2 blocks,
    giving 12x12 images that keep the evaluation runs cheap.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise IngestionError("mlxtend is required for the bundled MNIST sample") from exc
    x, y = mnist_data()
    x = (np.round(x).astype(np.uint8).reshape(-1, 1, 28, 28)).astype(np.float32) / 255.0
    if desk:
        x = x[:, :, 2:26, 2:26].reshape(-1, 1, 12, 2, 12, 2).mean(axis=(3, 5))
    return Dataset(np.ascontiguousarray(x, dtype=np.float32), y.astype(np.int64))


# ----------------------------------------------------------------------
# normalisation and sampling


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray  # per channel
    std: np.ndarray

    @classmethod
    def fit(cls, train: Dataset) -> "Normalizer":
        x = train.images.astype(np.float64)
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        return cls(mean.astype(np.float32), np.where(std > 0, std, 1.0).astype(np.float32))

    def apply(self, images: np.ndarray) -> np.ndarray:
        m = self.mean.reshape(1, -1, 1, 1)
        s = self.std.reshape(1, -1, 1, 1)
        return ((images - m) / s).astype(np.float32)


def split_train_val(train: Dataset, seed: int, val_size: int | None = None):
    """Disjoint, exhaustive, seed-deterministic split.

    ``val_size`` defaults to one fifth of the data (10,000 of 50,000).
    Returns ``(train_part, val_part, (train_idx, val_idx))``.
    """
    n = len(train)
    val_size = n // 5 if val_size is None else int(val_size)
    if not 0 <= val_size <= n:
        raise ArgumentError(f"val_size {val_size} outside [0, {n}]")
    perm = rng_for(seed, "split").permutation(n)
    val_idx = np.sort(perm[:val_size])
    train_idx = np.sort(perm[val_size:])
    return train.subset(train_idx), train.subset(val_idx), (train_idx, val_idx)


def balanced_indices(labels: np.ndarray, per_class: int, seed: int, num_classes: int = 10) -> np.ndarray:
    if per_class < 0:
        raise ArgumentError("per_class must be non-negative")
    rng = rng_for(seed, "balanced")
    chosen = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        if per_class > pool.size:
            raise ArgumentError(f"class {c} has {pool.size} samples, {per_class} requested")
        chosen.append(np.sort(rng.choice(pool, size=per_class, replace=False)))
    return np.sort(np.concatenate(chosen)).astype(np.int64) if chosen else np.zeros(0, np.int64)


def balanced_subset(test: Dataset, per_class: int, seed: int, persist_to=None) -> tuple[Dataset, np.ndarray]:
    """Equal-count class subset; the index list is written to ``persist_to`` if given."""
    idx = balanced_indices(test.labels, per_class, seed, test.num_classes)
    if persist_to is not None:
        save_indices(persist_to, idx, {"per_class": per_class, "seed": seed})
    return test.subset(idx), idx


def save_indices(path, indices, meta: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({"indices": [int(i) for i in indices], **(meta or {})}))


def load_indices(path) -> np.ndarray:
    return np.asarray(json.loads(Path(path).read_text())["indices"], dtype=np.int64)


def interleave(clean: np.ndarray, adversarial: np.ndarray) -> np.ndarray:
    """[c0, a0, c1, a1, ...] along the first axis."""
    clean, adversarial = np.asarray(clean), np.asarray(adversarial)
    if clean.shape != adversarial.shape:
        raise ArgumentError(f"clean {clean.shape} and adversarial {adversarial.shape} differ")
    out = np.empty((2 * clean.shape[0],) + clean.shape[1:], dtype=clean.dtype)
    out[0::2] = clean
    out[1::2] = adversarial
    return out


def deinterleave(sequence: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return sequence[0::2], sequence[1::2]
