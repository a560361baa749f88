"""Dataset ingestion (IDX, CIFAR-10 binary), IID splitting and label perturbation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from qinfer.errors import DomainError, FormatError, LengthError

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR10_RECORD = 1 + 3072
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{k}.bin" for k in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Row-major feature matrix in [0, 1] with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DomainError("features must be a 2-D array (examples x dimensions)")
        if len(self.features) != len(self.labels):
            raise DomainError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError(f"labels must lie in 0..{self.num_classes - 1}")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class Shard(LabeledDataset):
    """One participant's examples (``owner`` N+1 marks the test shard)."""

    owner: int = 0
    perturbation: float = 0.0


def parse_idx(data: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Decode an IDX byte stream.

    Label files (magic ``0x00000801``) decode to an int64 vector; image files
    (``0x00000803``) to a float64 array ``(count, rows, cols)`` scaled by 1/255.
    """
    if len(data) < 4:
        raise LengthError(f"IDX stream of {len(data)} bytes is too short for a header")
    (magic,) = struct.unpack(">I", data[:4])
    allowed = (IDX_LABELS_MAGIC, IDX_IMAGES_MAGIC) if expected_magic is None else (expected_magic,)
    if magic not in allowed:
        wanted = " or ".join(f"0x{m:08x}" for m in allowed)
        raise FormatError(f"bad IDX magic: expected {wanted}, found 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise LengthError(f"IDX header needs {header} bytes, stream has {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise LengthError(
            f"IDX payload truncated: header promises {size} bytes, found {len(data) - header}"
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)
    if magic == IDX_LABELS_MAGIC:
        return raw.astype(np.int64)
    return raw.astype(np.float64) / 255.0


def encode_idx(array: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx` for uint8 payloads (used for fixtures)."""
    array = np.asarray(array)
    if array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    elif array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    else:
        raise DomainError("IDX fixtures are either 1-D labels or 3-D images")
    payload = np.asarray(array, dtype=np.uint8)
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + payload.tobytes()


def fixture_streams() -> dict[str, bytes]:
    """Handcrafted IDX fixtures with known decodings."""
    return {
        "labels-one.idx1": encode_idx(np.array([7])),
        "images-2x2.idx3": encode_idx(np.array([[[0, 255], [0, 255]]])),
    }


def read_idx(path: str | Path, expected_magic: int | None = None) -> np.ndarray:
    path = Path(path)
    return parse_idx(path.read_bytes(), expected_magic)


def load_mnist_split(directory: str | Path, split: str = "train") -> LabeledDataset:
    images_name, labels_name = MNIST_FILES[split]
    directory = Path(directory)
    images = read_idx(directory / images_name, IDX_IMAGES_MAGIC)
    labels = read_idx(directory / labels_name, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{images_name} has {len(images)} images but {labels_name} has {len(labels)} labels")
    return LabeledDataset(images.reshape(len(images), -1), labels, 10)


def load_mnist(directory: str | Path) -> LabeledDataset:
    """The full 70000-example pool (official train and test files concatenated)."""
    return concat([load_mnist_split(directory, "train"), load_mnist_split(directory, "test")])


def parse_cifar10(data: bytes) -> LabeledDataset:
    if len(data) % CIFAR10_RECORD:
        raise LengthError(f"CIFAR-10 stream length {len(data)} is not a multiple of {CIFAR10_RECORD}")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        raise FormatError(f"CIFAR-10 label byte {labels.max()} out of range 0..9")
    return LabeledDataset(records[:, 1:].astype(np.float64) / 255.0, labels, 10)


def load_cifar10(directory: str | Path) -> LabeledDataset:
    directory = Path(directory)
    names = CIFAR10_TRAIN_FILES + (CIFAR10_TEST_FILE,)
    return concat([parse_cifar10((directory / name).read_bytes()) for name in names])


def concat(parts: list[LabeledDataset]) -> LabeledDataset:
    classes = {p.num_classes for p in parts}
    if len(classes) != 1:
        raise DomainError("cannot concatenate datasets with different class counts")
    return LabeledDataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        classes.pop(),
    )


def split_iid(dataset: LabeledDataset, n_participants: int, seed: int) -> list[Shard]:
    """Shuffle and cut into N equal participant shards plus a test shard.

    The test shard (owner N+1, last in the list) also receives the remainder.
    """
    if n_participants < 1:
        raise DomainError(f"need at least one participant, got {n_participants}")
    total = len(dataset)
    if total < n_participants + 1:
        raise DomainError(f"{total} examples cannot fill {n_participants + 1} shards")
    order = np.random.default_rng(seed).permutation(total)
    size = total // (n_participants + 1)
    shards = []
    for k in range(n_participants + 1):
        idx = order[k * size : (k + 1) * size] if k < n_participants else order[k * size :]
        shards.append(
            Shard(dataset.features[idx], dataset.labels[idx], dataset.num_classes, owner=k + 1)
        )
    return shards


def perturbation_probability(n: int, n_participants: int) -> float:
    """Linearly decreasing resampling probability, 1 for participant 1 and 0 for N."""
    if not 1 <= n <= n_participants:
        raise DomainError(f"participant id {n} outside 1..{n_participants}")
    if n_participants == 1:
        return 0.0
    return (n_participants - n) / (n_participants - 1)


def perturb_labels(shard: Shard, n: int, n_participants: int, rng: np.random.Generator) -> Shard:
    """Resample each label uniformly over all classes with the participant's probability."""
    p = perturbation_probability(n, n_participants)
    size = len(shard.labels)
    hit = rng.random(size) < p
    fresh = rng.integers(0, shard.num_classes, size)
    labels = np.where(hit, fresh, shard.labels)
    return replace(shard, labels=labels, perturbation=p)
