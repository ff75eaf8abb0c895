"""Labeled datasets, file-format readers and stratified iid client shards."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class RecordSizeError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.shape[0] != labels.shape[0]:
            raise CountMismatchError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise LabelRangeError(f"labels must lie in [0, {self.class_count})")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[indices], self.labels[indices], self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def blob_means(classes: int, dims: int, means_seed: int = 0, strong_dims: int = 3,
               weak_amplitude: float = 0.06) -> np.ndarray:
    """Fixed class centres shared by train and test draws.

    The first ``strong_dims`` coordinates are drawn from [0.15, 0.85], so
    classes differ there by large gaps.  The remaining coordinates sit within
    ``weak_amplitude`` of 0.5: individually small but collectively predictive
    differences that a small l-inf perturbation can erase.
    """
    rng = np.random.default_rng(means_seed)
    means = 0.5 + rng.uniform(-weak_amplitude, weak_amplitude, size=(classes, dims))
    k = min(strong_dims, dims)
    means[:, :k] = rng.uniform(0.15, 0.85, size=(classes, k))
    return means


def generate_blobs(classes: int, per_class: int, dims, spread: float = 0.15, seed: int = 0,
                   means_seed: int = 0, strong_dims: int = 3, weak_amplitude: float = 0.06) -> LabeledDataset:
    """Gaussian clusters around fixed class means, clipped to [0, 1].

    ``dims`` is an int or an input shape such as ``(1, 8, 8)``.  The class
    means depend only on ``means_seed`` (see :func:`blob_means`), so train and
    test sets drawn with different ``seed`` values share one distribution.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    shape = (int(dims),) if np.isscalar(dims) else tuple(int(d) for d in dims)
    d = int(np.prod(shape))
    means = blob_means(classes, d, means_seed, strong_dims, weak_amplitude)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, d))
    x = np.clip(x, 0.0, 1.0)
    return LabeledDataset(x.reshape((labels.size,) + shape), labels, classes)


# --- IDX ----------------------------------------------------------------

_IDX_DTYPES = {0x08: np.dtype("u1"), 0x0E: np.dtype(">f8")}
_IDX_CODES = {"u8": 0x08, "f8": 0x0E}


def read_idx(path) -> np.ndarray:
    """Raw array from an IDX file (unsigned byte or big-endian double payload)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: truncated payload (no header)")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES or ndim == 0:
        raise BadMagicError(f"{path}: bad magic 0x{raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedPayloadError(f"{path}: truncated payload (header)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header < expected:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(raw) - header} of {expected} bytes)")
    if len(raw) - header > expected:
        raise DataFormatError(f"{path}: {len(raw) - header - expected} trailing bytes after payload")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code, payload = 0x08, array.tobytes()
    elif array.dtype.kind == "f":
        code, payload = 0x0E, array.astype(">f8").tobytes()
    else:
        raise TypeError(f"unsupported IDX dtype {array.dtype}")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + payload)


def _check_label_magic(path) -> None:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head != b"\x00\x00\x08\x01":
        raise BadMagicError(f"{path}: bad magic 0x{head.hex()} for a label file")


def load_idx(images_path, labels_path, class_count: int | None = None) -> LabeledDataset:
    """Images (ndim >= 2 after the count) and labels (magic 0x00000801).

    Byte pixels are scaled to [0, 1] by /255; double payloads are taken as is.
    """
    raw_images = read_idx(images_path)
    if raw_images.ndim < 2:
        raise BadMagicError(f"{images_path}: bad magic, a 1-d IDX file is not an image file")
    _check_label_magic(labels_path)
    labels = read_idx(labels_path)
    if raw_images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"image/label count mismatch: {raw_images.shape[0]} images vs {labels.shape[0]} labels"
        )
    if raw_images.dtype == np.uint8:
        images = raw_images.astype(np.float64) / 255.0
    else:
        images = raw_images.astype(np.float64)
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 2
    return LabeledDataset(images, labels, class_count)


def save_idx(dataset: LabeledDataset, images_path, labels_path, dtype: str = "u8") -> None:
    """Inverse of :func:`load_idx`; ``dtype`` is ``"u8"`` (x*255, rounded) or ``"f8"``."""
    if dtype == "u8":
        x = dataset.inputs
        if x.size and (x.min() < 0 or x.max() > 1):
            raise ValueError("u8 export needs inputs in [0, 1]")
        write_idx(images_path, np.rint(x * 255.0).astype(np.uint8))
    elif dtype == "f8":
        write_idx(images_path, dataset.inputs)
    else:
        raise ValueError(f"unknown IDX dtype {dtype!r}")
    write_idx(labels_path, dataset.labels.astype(np.uint8))


# --- CIFAR-10 -------------------------------------------------------------

CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10_binary(path) -> LabeledDataset:
    """Read the CIFAR-10 binary layout: 1 label byte + 3072 channel-major pixels."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise RecordSizeError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise LabelRangeError(f"{path}: label {labels.max()} outside [0, 10)")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, 10)


# --- partitioning ---------------------------------------------------------


@dataclass(frozen=True)
class PartitionPlan:
    num_clients: int
    server_is_client: bool
    seed: int
    shards: tuple

    @property
    def server_shard(self) -> np.ndarray:
        if not self.server_is_client:
            raise ValueError("this partition has no server shard")
        return self.shards[0]


def partition_iid(dataset: LabeledDataset, num_clients: int, server_is_client: bool = True,
                  seed: int = 0) -> PartitionPlan:
    """Stratified iid split: shuffle each class, then deal its indices round-robin.

    The dealing offset carries over from one class to the next so that shard
    sizes stay balanced as well as per-class counts.  With
    ``server_is_client`` shard 0 belongs to the server.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    offset = 0
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if 0 < idx.size < num_clients or (idx.size == 0 and len(dataset)):
            warnings.warn(
                f"class {c} has {idx.size} samples for {num_clients} shards; some shards will lack it",
                stacklevel=2,
            )
        idx = rng.permutation(idx)
        for j, i in enumerate(idx):
            buckets[(offset + j) % num_clients].append(int(i))
        offset = (offset + idx.size) % num_clients
    shards = tuple(np.array(sorted(b), dtype=np.int64) for b in buckets)
    return PartitionPlan(num_clients, server_is_client, seed, shards)
