"""Samples, datasets and IDX (MNIST) ingestion."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from reconbound.rng import Stream, substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(Exception):
    """Problem with input data; the CLI maps these to exit code 3."""

    code = "data_error"


class IdxMagicError(DataError):
    code = "idx_bad_magic"


class IdxTruncatedError(DataError):
    code = "idx_truncated"


class ClassSelectionError(DataError):
    code = "class_selection"


@dataclass(frozen=True)
class Sample:
    """One record ``z = (x, y)``; ``x`` is private, the label ``y`` is public."""

    x: np.ndarray
    y: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix in the box ``[lo, hi]^d`` plus integer labels."""

    X: np.ndarray
    y: np.ndarray
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DataError(f"inconsistent shapes X={X.shape} y={y.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain non-finite values")
        if self.lo > self.hi:
            raise DataError(f"empty box [{self.lo}, {self.hi}]")
        if X.size and (X.min() < self.lo - 1e-12 or X.max() > self.hi + 1e-12):
            raise DataError(f"features fall outside the box [{self.lo}, {self.hi}]")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @cached_property
    def diameters(self) -> np.ndarray:
        return np.full(self.dim, self.hi - self.lo)

    def sample(self, i: int) -> Sample:
        return Sample(self.X[i], int(self.y[i]))

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.lo, self.hi)

    def without(self, i: int) -> "Dataset":
        keep = np.arange(len(self)) != i
        return Dataset(self.X[keep], self.y[keep], self.lo, self.hi)


# ---------------------------------------------------------------------------
# IDX

def _read_bytes(path: Union[str, Path]) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(path: Union[str, Path], expect: str | None = None) -> np.ndarray:
    """Parse an IDX file.

    Images (magic 0x803) come back flattened to ``(count, rows*cols)`` float64
    in [0, 1]; labels (magic 0x801) as an int64 vector.  Gzipped files are
    accepted.  ``expect`` ("images" or "labels") turns a mismatched magic into
    an :class:`IdxMagicError`.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        kind, ndim = "images", 3
    elif magic == IDX_LABELS_MAGIC:
        kind, ndim = "labels", 1
    else:
        raise IdxMagicError(f"{path}: unknown IDX magic 0x{magic:08x}")
    if expect is not None and expect != kind:
        raise IdxMagicError(f"{path}: wrong magic 0x{magic:08x}, expected an IDX {expect} file")

    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < count:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {count}")
    data = np.frombuffer(payload, dtype=np.uint8, count=count)
    if kind == "labels":
        return data.astype(np.int64)
    return data.reshape(dims[0], dims[1] * dims[2]).astype(np.float64) / 255.0


def load_idx_dataset(images: Union[str, Path], labels: Union[str, Path]) -> Dataset:
    X = parse_idx(images, expect="images")
    y = parse_idx(labels, expect="labels")
    if X.shape[0] != y.shape[0]:
        raise DataError(f"{X.shape[0]} images but {y.shape[0]} labels")
    return Dataset(X, y, 0.0, 1.0)


def filter_binary(dataset: Dataset, classes: tuple[int, int] = (0, 1)) -> Dataset:
    """Keep two classes (in original order) and relabel them 0 and 1."""
    a, b = classes
    if a == b:
        raise ClassSelectionError("filter_binary needs two distinct classes")
    keep = (dataset.y == a) | (dataset.y == b)
    for c in classes:
        if not np.any(dataset.y == c):
            raise ClassSelectionError(f"class {c} does not occur in the dataset")
    if not keep.any():
        raise ClassSelectionError("selection is empty")
    return Dataset(dataset.X[keep], (dataset.y[keep] == b).astype(np.int64), dataset.lo, dataset.hi)


def split(dataset: Dataset, n_train: int, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Deterministic disjoint train/test subsets."""
    if n_train + n_test > len(dataset):
        raise DataError(f"asked for {n_train}+{n_test} samples, only {len(dataset)} available")
    perm = substream(seed, Stream.DATA).permutation(len(dataset))
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:n_train + n_test]))


def make_synthetic(
    n: int,
    dim: int,
    num_classes: int = 2,
    seed: int = 0,
    separation: float = 0.3,
    max_norm: float | None = None,
) -> Dataset:
    """Gaussian class blobs clipped to ``[0, 1]^dim``.

    With ``max_norm`` set, rows are rescaled so that ``|x| <= max_norm``; the
    box stays ``[0, 1]``.
    """
    rng = substream(seed, Stream.DATA, 1)
    centers = 0.5 + separation * (rng.random((num_classes, dim)) - 0.5)
    y = rng.integers(0, num_classes, size=n)
    X = np.clip(centers[y] + 0.15 * rng.standard_normal((n, dim)), 0.0, 1.0)
    if max_norm is not None:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X * np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))
    return Dataset(X, y, 0.0, 1.0)


def balanced_subset(dataset: Dataset, per_class: int, seed: int = 0) -> Dataset:
    """``per_class`` samples of every label, drawn without replacement, in original order."""
    rng = substream(seed, Stream.DATA, 2)
    picks = []
    for c in np.unique(dataset.y):
        idx = np.flatnonzero(dataset.y == c)
        if idx.size < per_class:
            raise ClassSelectionError(f"class {c} has {idx.size} samples, {per_class} requested")
        picks.append(rng.choice(idx, size=per_class, replace=False))
    return dataset.subset(np.sort(np.concatenate(picks)))
