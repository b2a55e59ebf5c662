"""Codebooks, codes, reconstruction, cross terms and the ICM encoder.

A model approximates ``x`` by the sum of one element from each of ``M``
dictionaries. Codes are integer arrays of shape ``(M,)`` for one vector or
``(N, M)`` for a corpus; entry ``m`` indexes dictionary ``m``.

For any query ``q`` the squared distance to a reconstruction splits as::

    ||q - xbar||^2 = sum_m ||q - c_m||^2 - (M - 1) ||q||^2 + delta

where ``delta = sum_{i != j} <c_i, c_j>`` is the cross term of the code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import as_matrix


@dataclass(frozen=True)
class CodebookSet:
    """M dictionaries of K elements in D dimensions, stored as an (M, K, D) tensor."""

    elements: np.ndarray

    def __post_init__(self):
        e = np.array(self.elements, dtype=np.float64, order="C", copy=True)
        if e.ndim != 3:
            raise ValueError(f"codebook tensor must be (M, K, D), got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook contains non-finite entries")
        e.setflags(write=False)
        object.__setattr__(self, "elements", e)

    @property
    def m(self) -> int:
        return self.elements.shape[0]

    @property
    def k(self) -> int:
        return self.elements.shape[1]

    @property
    def d(self) -> int:
        return self.elements.shape[2]

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.elements))

    def norms(self) -> np.ndarray:
        """(M, K) squared element norms."""
        return np.einsum("mkd,mkd->mk", self.elements, self.elements)

    def flat(self) -> np.ndarray:
        return self.elements.reshape(self.m * self.k, self.d)


def _elements(codebooks) -> np.ndarray:
    if isinstance(codebooks, CodebookSet):
        return codebooks.elements
    return np.asarray(codebooks, dtype=np.float64)


def check_codes(codes, m: int, k: int) -> np.ndarray:
    c = np.asarray(codes)
    if c.shape[-1] != m:
        raise ValueError(f"code length {c.shape[-1]} does not match M={m}")
    if c.size and (c.min() < 0 or c.max() >= k):
        raise ValueError(f"code entries must lie in [0, {k})")
    return c.astype(np.int64, copy=False)


def selected_elements(codebooks, codes) -> np.ndarray:
    """Elements picked by ``codes``: shape (..., M, D)."""
    e = _elements(codebooks)
    c = check_codes(codes, e.shape[0], e.shape[1])
    return e[np.arange(e.shape[0]), c]


def reconstruct(codebooks, codes) -> np.ndarray:
    """Sum of the selected elements; (D,) for one code, (N, D) for a batch."""
    e = _elements(codebooks)
    c = check_codes(codes, e.shape[0], e.shape[1])
    out = np.zeros(c.shape[:-1] + (e.shape[2],))
    for m in range(e.shape[0]):
        out += e[m][c[..., m]]
    return out


def quantization_error(codebooks, codes, dataset) -> float:
    x = as_matrix(dataset)
    c = np.asarray(codes)
    if c.ndim != 2 or c.shape[0] != x.shape[0]:
        raise ValueError(f"{c.shape[0] if c.ndim == 2 else 1} codes for {x.shape[0]} vectors")
    r = x - reconstruct(codebooks, c)
    return float(np.einsum("nd,nd->", r, r))


@dataclass(frozen=True)
class InnerProductCache:
    """Inner products between elements of different dictionaries.

    ``table[m*K + r, l*K + s] = <c_mr, c_ls>`` for ``m != l``; the diagonal
    blocks are zero and unused.
    """

    table: np.ndarray
    m: int
    k: int

    def delta(self, codes) -> np.ndarray | float:
        c = check_codes(codes, self.m, self.k)
        flat = c + self.k * np.arange(self.m)
        vals = self.table[flat[..., :, None], flat[..., None, :]].sum(axis=(-1, -2))
        return float(vals) if np.ndim(vals) == 0 else vals


def build_inner_product_cache(codebooks) -> InnerProductCache:
    e = _elements(codebooks)
    m, k, _ = e.shape
    flat = e.reshape(m * k, -1)
    table = flat @ flat.T
    table = 0.5 * (table + table.T)
    for i in range(m):
        table[i * k:(i + 1) * k, i * k:(i + 1) * k] = 0.0
    table.setflags(write=False)
    return InnerProductCache(table, m, k)


def cross_term_delta(codebooks, codes, cache: InnerProductCache | None = None):
    """delta = sum_{i != j} <c_{i,k_i}, c_{j,k_j}> for one code or a batch."""
    if cache is not None:
        return cache.delta(codes)
    sel = selected_elements(codebooks, codes)
    gram = np.einsum("...id,...jd->...ij", sel, sel)
    vals = gram.sum(axis=(-1, -2)) - np.trace(gram, axis1=-2, axis2=-1)
    return float(vals) if np.ndim(vals) == 0 else vals


def batch_delta(codebooks, codes) -> np.ndarray:
    """Per-point delta via ||xbar||^2 - sum ||c||^2 (vectorized corpus path)."""
    e = _elements(codebooks)
    c = check_codes(codes, e.shape[0], e.shape[1])
    xbar = reconstruct(e, c)
    norms = np.einsum("mkd,mkd->mk", e, e)
    own = norms[np.arange(e.shape[0]), c].sum(-1)
    return np.einsum("nd,nd->n", xbar, xbar) - own


def penalized_objective(codebooks, x, codes, mu: float, epsilon: float) -> np.ndarray:
    """Per-point ||x - xbar||^2 + mu (delta - epsilon)^2."""
    x = as_matrix(x)
    c = np.atleast_2d(codes)
    r = x - reconstruct(codebooks, c)
    out = np.einsum("nd,nd->n", r, r)
    if mu:
        out = out + mu * (cross_term_delta(codebooks, c) - epsilon) ** 2
    return out


def independent_init(codebooks, x) -> np.ndarray:
    """Nearest element of each dictionary, chosen independently (PQ-style)."""
    e = _elements(codebooks)
    x = as_matrix(x)
    codes = np.empty((x.shape[0], e.shape[0]), dtype=np.int64)
    for m in range(e.shape[0]):
        d = -2.0 * x @ e[m].T + np.einsum("kd,kd->k", e[m], e[m])[None, :]
        codes[:, m] = d.argmin(1)
    return codes


def greedy_init(codebooks, x) -> np.ndarray:
    """Pick dictionaries in order, each minimizing the current residual."""
    e = _elements(codebooks)
    x = as_matrix(x)
    resid = x.copy()
    codes = np.empty((x.shape[0], e.shape[0]), dtype=np.int64)
    for m in range(e.shape[0]):
        d = -2.0 * resid @ e[m].T + np.einsum("kd,kd->k", e[m], e[m])[None, :]
        codes[:, m] = d.argmin(1)
        resid -= e[m][codes[:, m]]
    return codes


def icm_encode_batch(codebooks, x, mu: float = 0.0, epsilon: float = 0.0,
                     init=None, sweeps: int = 1) -> np.ndarray:
    """Iterated conditional modes over the M code entries of every row of ``x``.

    Each step re-chooses one entry by exhaustive search over its dictionary with the
    others fixed, minimizing ``||x - xbar||^2 + mu (delta - epsilon)^2``. The current
    entry is among the candidates, so no step increases a point's objective. Ties go
    to the lowest element index unless the current entry is among the minimizers.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    e = _elements(codebooks)
    M, K, _ = e.shape
    x = as_matrix(x)
    n = x.shape[0]
    codes = greedy_init(e, x) if init is None else check_codes(np.atleast_2d(init), M, K).copy()
    if codes.shape[0] != n:
        raise ValueError("init must provide one code per vector")
    norms = np.einsum("mkd,mkd->mk", e, e)
    rows = np.arange(n)
    xbar = reconstruct(e, codes)
    for _ in range(sweeps):
        for m in range(M):
            cur = e[m][codes[:, m]]
            rest = xbar - cur                      # sum of the other M-1 elements
            target = x - rest
            # ||x - rest - c||^2 up to a per-point constant
            obj = norms[m][None, :] - 2.0 * target @ e[m].T
            if mu:
                rest_norm = np.einsum("nd,nd->n", rest, rest)
                rest_self = norms[np.arange(M)[None, :], codes].sum(1) - norms[m][codes[:, m]]
                delta_rest = rest_norm - rest_self    # cross terms among the other dictionaries
                dev = delta_rest[:, None] + 2.0 * (rest @ e[m].T) - epsilon
                obj = obj + mu * dev * dev
            best = obj.argmin(1)
            keep = obj[rows, codes[:, m]] <= obj[rows, best]
            best = np.where(keep, codes[:, m], best)
            codes[:, m] = best
            xbar = rest + e[m][best]
    return codes


def icm_encode(codebooks, x, mu: float = 0.0, epsilon: float = 0.0, init=None,
               sweeps: int = 1) -> np.ndarray:
    """Encode a single vector; see :func:`icm_encode_batch`."""
    x = np.asarray(x, dtype=np.float64)
    init2 = None if init is None else np.atleast_2d(init)
    return icm_encode_batch(codebooks, x[None, :], mu, epsilon, init2, sweeps)[0]


# ---------------------------------------------------------------- code packing

def bits_per_index(k: int) -> int:
    return max(1, math.ceil(math.log2(k))) if k > 1 else 1


def pack_codes(codes, k: int) -> bytes:
    """One byte per index for K <= 256, otherwise a little-endian bitfield per vector
    of ``M * ceil(log2 K)`` bits padded to a byte boundary."""
    c = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    if c.size and (c.min() < 0 or c.max() >= k):
        raise ValueError("code entry out of range")
    if k <= 256:
        return c.astype(np.uint8).tobytes()
    b = bits_per_index(k)
    n, m = c.shape
    bits = ((c[:, :, None] >> np.arange(b)) & 1).astype(np.uint8).reshape(n, m * b)
    pad = (-bits.shape[1]) % 8
    if pad:
        bits = np.concatenate([bits, np.zeros((n, pad), np.uint8)], axis=1)
    return np.packbits(bits, axis=1, bitorder="little").tobytes()


def code_bytes_per_vector(m: int, k: int) -> int:
    return m if k <= 256 else (m * bits_per_index(k) + 7) // 8


def unpack_codes(buf: bytes, n: int, m: int, k: int) -> np.ndarray:
    per = code_bytes_per_vector(m, k)
    raw = np.frombuffer(buf, dtype=np.uint8, count=n * per)
    if k <= 256:
        return raw.reshape(n, m).astype(np.int64)
    b = bits_per_index(k)
    bits = np.unpackbits(raw.reshape(n, per), axis=1, bitorder="little")[:, :m * b]
    bits = bits.reshape(n, m, b).astype(np.int64)
    return (bits << np.arange(b)).sum(-1)
