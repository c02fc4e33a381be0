"""Task streams: IDX ingestion plus permuted, split-class and synthetic benchmarks."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import PER_TASK, SHARED, HeadPolicy

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DATA_ENV = "DRIFTGUARD_DATA"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class FormatError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


# -- IDX -----------------------------------------------------------------------------
def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise FormatError(f"{path}: truncated payload ({len(raw) - header} of {expected} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair as flattened ``[0, 1]`` vectors and int labels."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return inputs, labels.astype(np.int64)


def load_mnist(root=None) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    root = Path(root) if root is not None else data_root() / "mnist"

    def find(name):
        for candidate in (root / name, root / (name + ".gz")):
            if candidate.exists():
                return candidate
        raise FileNotFoundError(f"missing MNIST file {name} under {root}")

    train = load_idx(find(MNIST_FILES["train_images"]), find(MNIST_FILES["train_labels"]))
    test = load_idx(find(MNIST_FILES["test_images"]), find(MNIST_FILES["test_labels"]))
    return train, test


def downsample(inputs: np.ndarray, side: int = 28) -> np.ndarray:
    """2x2 average pooling of flattened square images (784 -> 196 for MNIST)."""
    n = inputs.shape[0]
    if inputs.shape[1] != side * side or side % 2:
        raise ConfigurationError(f"cannot pool {inputs.shape[1]} features as {side}x{side} images")
    img = inputs.reshape(n, side // 2, 2, side // 2, 2)
    return img.mean(axis=(2, 4)).reshape(n, -1)


# -- task containers ----------------------------------------------------------------
def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TaskDataset:
    task_id: int
    inputs: np.ndarray
    labels: np.ndarray
    class_map: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "inputs", _frozen(np.asarray(self.inputs, dtype=np.float64)))
        object.__setattr__(self, "labels", _frozen(np.asarray(self.labels, dtype=np.int64)))
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels differ in length")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple  # of (train, test) TaskDataset pairs
    heads: HeadPolicy
    name: str = ""

    def __post_init__(self):
        for k, (train, test) in enumerate(self.tasks):
            if train.task_id != k or test.task_id != k:
                raise ValueError(f"task ids must be 0..N-1 in order (position {k})")
            if train.class_map != test.class_map:
                raise ValueError(f"task {k}: train and test class maps differ")

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def input_dim(self) -> int:
        return self.tasks[0][0].inputs.shape[1]

    def train(self, k: int) -> TaskDataset:
        return self.tasks[k][0]

    def test(self, k: int) -> TaskDataset:
        return self.tasks[k][1]


# -- benchmarks ------------------------------------------------------------------------
def task_permutations(dim: int, n_tasks: int, seed: int) -> list[np.ndarray]:
    """Identity for task 0, then distinct seeded permutations."""
    rng = np.random.default_rng(seed)
    perms = [np.arange(dim)]
    seen = {perms[0].tobytes()}
    while len(perms) < n_tasks:
        p = rng.permutation(dim)
        if p.tobytes() not in seen:
            seen.add(p.tobytes())
            perms.append(p)
    return perms


def permuted_tasks(train, test, n_tasks: int, seed: int = 0) -> TaskStream:
    if n_tasks < 1:
        raise ConfigurationError("n_tasks must be at least 1")
    (x_tr, y_tr), (x_te, y_te) = train, test
    n_classes = int(max(y_tr.max(), y_te.max())) + 1
    identity = {c: c for c in range(n_classes)}
    tasks = []
    for k, perm in enumerate(task_permutations(x_tr.shape[1], n_tasks, seed)):
        tasks.append((TaskDataset(k, x_tr[:, perm], y_tr, identity),
                      TaskDataset(k, x_te[:, perm], y_te, identity)))
    return TaskStream(tuple(tasks), HeadPolicy(SHARED, n_classes, 1), "permuted")


def split_tasks(train, test, classes_per_task: int, seed: int = 0) -> TaskStream:
    """Group consecutive classes into tasks with local labels ``0..c-1``."""
    (x_tr, y_tr), (x_te, y_te) = train, test
    n_classes = int(max(y_tr.max(), y_te.max())) + 1
    if classes_per_task < 1 or n_classes % classes_per_task:
        raise ConfigurationError(f"{n_classes} classes are not divisible into groups of {classes_per_task}")
    rng = np.random.default_rng(seed)
    n_tasks = n_classes // classes_per_task
    tasks = []
    for k in range(n_tasks):
        originals = range(k * classes_per_task, (k + 1) * classes_per_task)
        class_map = {c: i for i, c in enumerate(originals)}
        pair = []
        for x, y in ((x_tr, y_tr), (x_te, y_te)):
            idx = np.flatnonzero((y >= originals.start) & (y < originals.stop))
            idx = idx[rng.permutation(idx.size)]
            pair.append(TaskDataset(k, x[idx], y[idx] - originals.start, class_map))
        tasks.append(tuple(pair))
    return TaskStream(tuple(tasks), HeadPolicy(PER_TASK, classes_per_task, n_tasks), "split")


def synthetic_tasks(n_tasks: int, dim: int, classes: int, n_per_class: int, seed: int = 0,
                    n_test_per_class: int | None = None, separation: float = 4.0,
                    head_mode: str = PER_TASK) -> TaskStream:
    """Gaussian clusters (unit variance) with fresh class means for every task.

    Every pair of means within a task is at least ``separation`` standard
    deviations apart.
    """
    if dim < 2:
        raise ConfigurationError("synthetic tasks need dim >= 2")
    rng = np.random.default_rng(seed)
    n_test = n_per_class if n_test_per_class is None else n_test_per_class
    # expected pairwise gap is spread * sqrt(2 * dim); aim at 1.5x the minimum
    spread = 1.5 * separation / np.sqrt(2.0 * dim)
    tasks = []
    for k in range(n_tasks):
        while True:
            means = rng.normal(0.0, spread, size=(classes, dim))
            gaps = [np.linalg.norm(means[i] - means[j]) for i in range(classes) for j in range(i)]
            if not gaps or min(gaps) >= separation:
                break
        pair = []
        for count in (n_per_class, n_test):
            y = np.repeat(np.arange(classes), count)
            x = means[y] + rng.normal(size=(y.size, dim))
            order = rng.permutation(y.size)
            pair.append((x[order], y[order]))
        class_map = {c: c for c in range(classes)}
        tasks.append((TaskDataset(k, pair[0][0], pair[0][1], class_map),
                      TaskDataset(k, pair[1][0], pair[1][1], class_map)))
    if head_mode == PER_TASK:
        heads = HeadPolicy(PER_TASK, classes, n_tasks)
    else:
        heads = HeadPolicy(SHARED, classes, 1)
    return TaskStream(tuple(tasks), heads, "synthetic")


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Indices of one shuffled epoch; the last batch may be short."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
