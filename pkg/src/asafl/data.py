"""Datasets and federated shards: synthetic blobs, non-IID splits, IDX files."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (n, d) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.classes)


@dataclass
class ShardPlan:
    shards: dict  # client_id -> np.ndarray of sample indices
    dirichlet_alpha: float | None

    def sizes(self) -> list[int]:
        return [len(self.shards[c]) for c in sorted(self.shards)]


def gen_synthetic(n: int, classes: int, dim: int, separation: float, seed: int) -> Dataset:
    """Unit-variance Gaussian blobs whose means are pairwise ``separation`` apart.

    Means are the vertices of a regular simplex, so ``dim >= classes - 1``.
    """
    if classes < 1 or n < classes or dim < 1:
        raise ValueError(f"invalid sizes n={n} classes={classes} dim={dim}")
    if dim < classes - 1:
        raise ValueError(f"{classes} equidistant means need dim >= {classes - 1}")
    rng = np.random.default_rng(seed)
    vertices = np.eye(classes) - 1.0 / classes  # pairwise distance sqrt(2)
    basis = np.linalg.svd(vertices, full_matrices=False)[2][: max(classes - 1, 1)]
    means = np.zeros((classes, dim))
    means[:, : basis.shape[0]] = vertices @ basis.T * (separation / np.sqrt(2.0))
    labels = rng.permutation(np.arange(n) % classes)
    features = means[labels] + rng.standard_normal((n, dim))
    return Dataset(features, labels, classes)


def _repair_empty(shards: list[list[int]]) -> None:
    for client, shard in enumerate(shards):
        if not shard:
            largest = max(range(len(shards)), key=lambda c: (len(shards[c]), -c))
            shard.append(shards[largest].pop())


def partition_noniid(labels, n_clients: int, alpha: float, seed: int) -> ShardPlan:
    """Per-class Dirichlet(alpha) proportions over clients."""
    labels = np.asarray(labels, dtype=int)
    if n_clients < 1 or alpha <= 0:
        raise ValueError("need n_clients >= 1 and alpha > 0")
    if n_clients > len(labels):
        raise ValueError(f"{n_clients} clients but only {len(labels)} samples")
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for client, part in enumerate(np.split(idx, cuts)):
            shards[client].extend(part.tolist())
    _repair_empty(shards)
    return ShardPlan({c: np.sort(np.array(s, dtype=int)) for c, s in enumerate(shards)}, alpha)


def partition_label_shards(labels, n_clients: int, shards_per_client: int, seed: int) -> ShardPlan:
    """Sort by label, cut into equal shards and deal them out at random."""
    labels = np.asarray(labels, dtype=int)
    total = n_clients * shards_per_client
    if n_clients < 1 or shards_per_client < 1 or total > len(labels):
        raise ValueError("need at least one sample per shard")
    rng = np.random.default_rng(seed)
    order = np.argsort(labels, kind="stable")
    pieces = np.array_split(order, total)
    dealt = rng.permutation(total)
    shards = {c: np.sort(np.concatenate([pieces[j] for j in dealt[c::n_clients]]))
              for c in range(n_clients)}
    return ShardPlan(shards, None)


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: missing magic number")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_idx(images_path, labels_path, limit: int | None = None, classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    features = images.reshape(len(images), int(np.prod(images.shape[1:]))).astype(float) / 255.0
    return Dataset(features, labels.astype(int), classes)


def write_idx(dataset: Dataset, images_path, labels_path, shape=(28, 28), compress: bool = False) -> None:
    """Inverse of :func:`load_idx` for features on the 1/255 grid."""
    pixels = np.rint(dataset.features * 255.0)
    if np.any(pixels < 0) or np.any(pixels > 255):
        raise ValueError("features must lie in [0, 1] to be stored as unsigned bytes")
    n = len(dataset)
    rows, cols = shape
    image_blob = struct.pack(">4I", IMAGES_MAGIC, n, rows, cols) + pixels.astype(np.uint8).tobytes()
    label_blob = struct.pack(">2I", LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    for path, blob in ((images_path, image_blob), (labels_path, label_blob)):
        Path(path).write_bytes(gzip.compress(blob, mtime=0) if compress else blob)


def write_dataset_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(dataset.features.shape[1])] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))
