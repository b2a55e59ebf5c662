"""Product quantization and Cartesian k-means, embedded as full-D codebooks.

Both trainers return codebooks whose element ``(m, k)`` is the sub-center
zero-padded into dimensions of subspace ``m`` (and, for CKM, mapped back
through the learned rotation). Elements of different dictionaries are then
exactly orthogonal, so the generic composite machinery applies unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CodebookSet
from .data import as_matrix
from .solvers import kmeans, squared_distances


@dataclass(frozen=True)
class SubspaceLayout:
    """Contiguous (start, length) spans partitioning [0, D)."""

    spans: tuple[tuple[int, int], ...]

    @classmethod
    def natural(cls, d: int, m: int) -> "SubspaceLayout":
        """Natural dimension order; the first ``d % m`` spans get one extra dimension."""
        if not 1 <= m <= d:
            raise ValueError(f"cannot split D={d} into M={m} subspaces")
        base, extra = divmod(d, m)
        spans, start = [], 0
        for i in range(m):
            length = base + (1 if i < extra else 0)
            spans.append((start, length))
            start += length
        return cls(tuple(spans))

    @property
    def m(self) -> int:
        return len(self.spans)

    @property
    def d(self) -> int:
        return sum(length for _, length in self.spans)

    def slices(self) -> list[slice]:
        return [slice(s, s + length) for s, length in self.spans]

    def validate(self, d: int) -> None:
        pos = 0
        for s, length in self.spans:
            if s != pos or length < 1:
                raise ValueError(f"layout is not a contiguous partition: {self.spans}")
            pos += length
        if pos != d:
            raise ValueError(f"layout covers {pos} dims, data has {d}")


def embed_subcodebooks(subs: list[np.ndarray], layout: SubspaceLayout) -> np.ndarray:
    k = subs[0].shape[0]
    out = np.zeros((layout.m, k, layout.d))
    for m, (sl, sub) in enumerate(zip(layout.slices(), subs)):
        out[m, :, sl] = sub
    return out


def _pq_encode(z: np.ndarray, subs, layout) -> np.ndarray:
    codes = np.empty((z.shape[0], layout.m), dtype=np.int64)
    for m, sl in enumerate(layout.slices()):
        codes[:, m] = squared_distances(z[:, sl], subs[m]).argmin(1)
    return codes


def _pq_error(z, subs, layout, codes) -> float:
    err = 0.0
    for m, sl in enumerate(layout.slices()):
        r = z[:, sl] - subs[m][codes[:, m]]
        err += float(np.einsum("nd,nd->", r, r))
    return err


def train_pq(dataset, m: int, k: int, layout: SubspaceLayout | None = None,
             kmeans_iters: int = 25, seed: int = 0) -> tuple[CodebookSet, np.ndarray]:
    x = as_matrix(dataset)
    if k > x.shape[0]:
        raise ValueError(f"k={k} exceeds the number of points n={x.shape[0]}")
    layout = layout or SubspaceLayout.natural(x.shape[1], m)
    layout.validate(x.shape[1])
    if layout.m != m:
        raise ValueError("layout does not have m spans")
    subs, codes = [], np.empty((x.shape[0], m), dtype=np.int64)
    for i, sl in enumerate(layout.slices()):
        res = kmeans(x[:, sl], k, max_iters=kmeans_iters, seed=seed + i)
        subs.append(res.centers)
        codes[:, i] = res.assignments
    return CodebookSet(embed_subcodebooks(subs, layout)), codes


@dataclass(frozen=True)
class Rotation:
    r: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError("rotation must be square")
        if np.abs(r.T @ r - np.eye(r.shape[0])).max() >= 1e-8:
            raise ValueError("rotation is not orthogonal")
        object.__setattr__(self, "r", r)

    @classmethod
    def identity(cls, d: int) -> "Rotation":
        return cls(np.eye(d))


def procrustes(x: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Orthogonal R minimizing ||x R - target||_F."""
    u, _, vt = np.linalg.svd(x.T @ target)
    return u @ vt


@dataclass
class CkmResult:
    codebooks: CodebookSet
    rotation: Rotation
    codes: np.ndarray
    history: list[float]


def train_ckm(dataset, m: int, k: int, kmeans_iters: int = 25, outer_iters: int = 30,
              seed: int = 0, layout: SubspaceLayout | None = None, rel_tol: float = 1e-5,
              random_init: bool = False) -> CkmResult:
    """Cartesian k-means: alternate PQ encoding/center updates in a rotated space
    with an orthogonal Procrustes update of the rotation.

    Data are rotated as ``z = x R``. ``history`` holds the rotated-space error
    after each alternation and is nonincreasing.
    """
    x = as_matrix(dataset)
    n, d = x.shape
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")
    layout = layout or SubspaceLayout.natural(d, m)
    layout.validate(d)
    if random_init:
        q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
        r = q
    else:
        r = np.eye(d)
    z = x @ r
    subs, codes = [], np.empty((n, m), dtype=np.int64)
    for i, sl in enumerate(layout.slices()):
        res = kmeans(z[:, sl], k, max_iters=kmeans_iters, seed=seed + i)
        subs.append(res.centers)
        codes[:, i] = res.assignments
    history = [_pq_error(z, subs, layout, codes)]
    for _ in range(outer_iters):
        # rotation step: z_hat is the current reconstruction in rotated space
        z_hat = np.zeros_like(z)
        for i, sl in enumerate(layout.slices()):
            z_hat[:, sl] = subs[i][codes[:, i]]
        r_new = procrustes(x, z_hat)
        z_new = x @ r_new
        if _pq_error(z_new, subs, layout, codes) <= history[-1]:
            r, z = r_new, z_new
        # assignment and center steps, each keeping the old state on ties
        new_codes = _pq_encode(z, subs, layout)
        for i, sl in enumerate(layout.slices()):
            d_old = ((z[:, sl] - subs[i][codes[:, i]]) ** 2).sum(1)
            d_new = ((z[:, sl] - subs[i][new_codes[:, i]]) ** 2).sum(1)
            codes[:, i] = np.where(d_new < d_old, new_codes[:, i], codes[:, i])
            counts = np.bincount(codes[:, i], minlength=k)
            sums = np.zeros((k, sl.stop - sl.start))
            np.add.at(sums, codes[:, i], z[:, sl])
            live = counts > 0
            subs[i][live] = sums[live] / counts[live, None]
        err = _pq_error(z, subs, layout, codes)
        prev = history[-1]
        history.append(err)
        if prev > 0 and (prev - err) / prev < rel_tol:
            break
        if prev == 0:
            break
    # x ~ z_hat R^T, so each embedded element maps back through R^T
    emb = embed_subcodebooks(subs, layout) @ r.T
    return CkmResult(CodebookSet(emb), Rotation(r), codes, history)
