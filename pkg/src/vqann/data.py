"""Dataset containers, TEXMEX ``*vecs`` I/O, synthetic data and exact ground truth.

The ``fvecs``/``bvecs``/``ivecs`` layout is the one used by the public SIFT1M and
GIST1M distributions: every record is a little-endian int32 dimension followed
by ``dim`` payload elements (float32, uint8 or int32).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

ElementKind = Literal["float32", "uint8", "int32"]
Metric = Literal["euclidean", "inner_product"]

_KIND_DTYPE = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "int32": np.dtype("<i4"),
}
_EXTENSION_KIND = {".fvecs": "float32", ".bvecs": "uint8", ".ivecs": "int32"}


class VecsFormatError(ValueError):
    """Raised for truncated or inconsistent ``*vecs`` files."""


@dataclass(frozen=True)
class Dataset:
    """An immutable N x D matrix of float64 vectors."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64, order="C", copy=True)
        if v.ndim != 2:
            raise ValueError(f"expected a 2-d matrix, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("a dataset needs n >= 1 and d >= 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("dataset contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, idx) -> "Dataset":
        return Dataset(self.vectors[np.asarray(idx)])


@dataclass(frozen=True)
class GroundTruth:
    """Exact neighbors, one row per query, best first."""

    neighbors: np.ndarray
    distances: np.ndarray | None = None
    metric: Metric = "euclidean"

    @property
    def n_queries(self) -> int:
        return self.neighbors.shape[0]

    @property
    def width(self) -> int:
        return self.neighbors.shape[1]


def as_matrix(x) -> np.ndarray:
    """Return the float64 matrix behind a Dataset or array-like."""
    if isinstance(x, Dataset):
        return x.vectors
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    return a


def _resolve_kind(path, element_kind) -> str:
    if element_kind is not None:
        if element_kind not in _KIND_DTYPE:
            raise ValueError(f"unknown element kind {element_kind!r}")
        return element_kind
    suffix = Path(path).suffix.lower()
    if suffix not in _EXTENSION_KIND:
        raise ValueError(f"cannot infer element kind from extension {suffix!r}")
    return _EXTENSION_KIND[suffix]


def resolve_data_path(path) -> Path:
    """Resolve relative dataset paths against ``$VQANN_DATA_DIR`` when set."""
    p = Path(path)
    root = os.environ.get("VQANN_DATA_DIR")
    if not p.is_absolute() and root and not p.exists():
        return Path(root) / p
    return p


def read_vecs(path, element_kind: ElementKind | None = None) -> Dataset:
    kind = _resolve_kind(path, element_kind)
    dtype = _KIND_DTYPE[kind]
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size < 4:
        raise VecsFormatError(f"{path}: file too short for a record header")
    dim = int(raw[:4].view("<i4")[0])
    if dim < 1:
        raise VecsFormatError(f"{path}: invalid dimension {dim}")
    record = 4 + dim * dtype.itemsize
    if raw.size % record:
        raise VecsFormatError(f"{path}: truncated record ({raw.size} bytes, record size {record})")
    rows = raw.reshape(-1, record)
    dims = rows[:, :4].copy().view("<i4").ravel()
    if np.any(dims != dim):
        bad = int(np.flatnonzero(dims != dim)[0])
        raise VecsFormatError(f"{path}: record {bad} has dim {dims[bad]}, expected {dim}")
    payload = rows[:, 4:].copy().view(dtype)
    return Dataset(payload.astype(np.float64))


def read_ivecs(path) -> np.ndarray:
    """Read an ivecs file as an int64 matrix (used for ground-truth files)."""
    return read_vecs(path, "int32").vectors.astype(np.int64)


def write_vecs(dataset, path, element_kind: ElementKind | None = None) -> None:
    kind = _resolve_kind(path, element_kind)
    dtype = _KIND_DTYPE[kind]
    x = np.asarray(dataset.vectors if isinstance(dataset, Dataset) else dataset)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError("cannot write an empty dataset")
    if kind == "float32":
        xf = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(xf)) or np.any(np.abs(xf) > np.finfo(np.float32).max):
            raise ValueError("values not representable as float32")
    else:
        info = np.iinfo(dtype)
        if np.any(x != np.round(x)) or np.any(x < info.min) or np.any(x > info.max):
            raise ValueError(f"values out of range for {kind}")
    n, dim = x.shape
    out = np.empty((n, 4 + dim * dtype.itemsize), dtype=np.uint8)
    out[:, :4] = np.array([dim], dtype="<i4").view(np.uint8)
    out[:, 4:] = np.ascontiguousarray(x.astype(dtype)).view(np.uint8).reshape(n, -1)
    out.tofile(path)


def synth_mixture(n: int, d: int, n_clusters: int, spread: float, seed: int) -> Dataset:
    """Gaussian mixture with centers uniform in [0, 1]^d and isotropic stddev ``spread``."""
    if n_clusters > n:
        raise ValueError("n_clusters must not exceed n")
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(n_clusters, d))
    labels = rng.integers(0, n_clusters, size=n)
    noise = rng.standard_normal((n, d)) * spread
    return Dataset(centers[labels] + noise)


def _chunked_rows(n: int, chunk: int):
    for start in range(0, n, chunk):
        yield slice(start, min(start + chunk, n))


def brute_force_groundtruth(base, queries, t_max: int, metric: Metric = "euclidean",
                            chunk: int = 16) -> GroundTruth:
    """Exact linear scan. Ties are broken by the lower base index."""
    b = as_matrix(base)
    q = as_matrix(queries)
    if b.shape[1] != q.shape[1]:
        raise ValueError(f"dimension mismatch: base d={b.shape[1]}, queries d={q.shape[1]}")
    if not 1 <= t_max <= b.shape[0]:
        raise ValueError("t_max must be in [1, base.n]")
    if metric not in ("euclidean", "inner_product"):
        raise ValueError(f"unknown metric {metric!r}")
    nbrs = np.empty((q.shape[0], t_max), dtype=np.int64)
    vals = np.empty((q.shape[0], t_max), dtype=np.float64)
    for sl in _chunked_rows(q.shape[0], chunk):
        if metric == "euclidean":
            diff = q[sl, None, :] - b[None, :, :]
            score = np.einsum("qnd,qnd->qn", diff, diff)
            key = score
        else:
            score = q[sl] @ b.T
            key = -score
        order = np.argsort(key, axis=1, kind="stable")[:, :t_max]
        nbrs[sl] = order
        vals[sl] = np.take_along_axis(score, order, axis=1)
    return GroundTruth(nbrs, vals, metric)
