"""Datasets: IDX (MNIST) ingestion, a synthetic generator, and client partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    class_count: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise InputError("features must be a 2-D array")
        if len(self.X) != len(self.y):
            raise InputError(f"{len(self.X)} feature rows but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.class_count)

    @property
    def feature_count(self) -> int:
        return self.X.shape[1]

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.class_count)


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    found = struct.unpack_from(">I", raw, 0)[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise FormatError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] and flattened."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), class_count)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, rows, cols) and labels (N,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise InputError("images must be (N, rows, cols) and labels (N,)")
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def export_bundled_mnist(directory) -> dict[str, Path]:
    """Write the 5,000-sample MNIST subset bundled with mlxtend as IDX files.

    Returns the paths keyed ``images`` and ``labels``. Requires the optional
    ``mlxtend`` dependency.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"images": directory / "mnist5k-images.idx3-ubyte", "labels": directory / "mnist5k-labels.idx1-ubyte"}
    write_idx(paths["images"], paths["labels"], X.reshape(-1, 28, 28).astype(np.uint8), y)
    return paths


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


def synthetic(
    n_samples: int = 1000,
    features: int = 20,
    classes: int = 2,
    separation: float = 3.0,
    noise: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian blobs around random class centres at distance ~``separation``."""
    if n_samples < 1 or features < 1 or classes < 2:
        raise InputError("need at least one sample, one feature and two classes")
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(classes, features))
    centres *= separation / np.linalg.norm(centres, axis=1, keepdims=True)
    y = np.arange(n_samples) % classes
    rng.shuffle(y)
    X = centres[y] + noise * rng.normal(size=(n_samples, features))
    return Dataset(X, y, classes)


# --------------------------------------------------------------------------
# Partitioning
# --------------------------------------------------------------------------


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short:
        # stable sort keeps the lower client index first on equal remainders
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition(
    dataset: Dataset,
    m: int,
    mode: str = "iid",
    alpha: float = 1.0,
    seed: int = 0,
    max_attempts: int = 100,
) -> list[Dataset]:
    """Split ``dataset`` into ``m`` disjoint, non-empty client shards.

    ``iid`` shuffles and deals near-equal shards. ``dirichlet`` draws, for each
    class, the share each client receives from Dirichlet(alpha * 1_m) and
    rounds counts by largest remainder; draws leaving a client empty are
    redrawn.
    """
    if m < 1:
        raise InputError("need at least one client")
    if m > len(dataset):
        raise InputError(f"{m} clients but only {len(dataset)} samples")
    rng = np.random.default_rng(seed)
    if mode == "iid":
        order = rng.permutation(len(dataset))
        return [dataset[np.sort(chunk)] for chunk in np.array_split(order, m)]
    if mode != "dirichlet":
        raise InputError(f"unknown partition mode {mode!r}")
    if not alpha > 0:
        raise InputError("dirichlet alpha must be > 0")

    for _ in range(max_attempts):
        shards: list[list[np.ndarray]] = [[] for _ in range(m)]
        for c in range(dataset.class_count):
            idx = np.flatnonzero(dataset.y == c)
            if not len(idx):
                continue
            idx = rng.permutation(idx)
            counts = _largest_remainder(rng.dirichlet(np.full(m, alpha)), len(idx))
            for client, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                shards[client].append(chunk)
        merged = [np.sort(np.concatenate(s)) if s else np.empty(0, dtype=np.int64) for s in shards]
        if all(len(s) for s in merged):
            return [dataset[s] for s in merged]
    raise InputError(f"could not draw a Dirichlet split with every client non-empty in {max_attempts} attempts")


def class_entropy(data: Dataset) -> float:
    """Shannon entropy (nats) of the shard's label distribution."""
    p = data.class_histogram() / max(len(data), 1)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
