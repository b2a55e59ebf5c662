"""Inverted multi-index with residual fine codes and lookup-based reranking.

Two coarse dictionaries (PQ over the two dimension halves) split the space into
K x K cells. Each base vector is stored in the cell of its nearest coarse pair,
together with a fine code of its residual. At query time cells are visited in
increasing coarse distance (multi-sequence traversal) until ``L`` candidates are
collected, and candidates are scored with

    ||q - c1 - c2 - sum_j r_j||^2 = ||q||^2 + sum ||c_i||^2 + sum ||r_j||^2
        - 2 sum q.c_i - 2 sum q.r_j + 2 sum_ij c_i.r_j
        + 2 c1.c2 + sum_{j != l} r_j.r_l

where the lookup score keeps terms two to six. The first term is constant per
query; the last two are dropped (both vanish for a PQ fine model).

Index file (``VQMI``), little-endian::

    magic 4s b"VQMI", version u16 (1), reserved u16, coarse_k u32, n u32,
    coarse_len u32, fine_len u32
    coarse model (VQM1, coarse_len bytes), fine model (VQM1, fine_len bytes)
    postings: for each cell in row-major (k1, k2) order, a varint count followed
              by varint gaps between ascending ids (the first gap is from -1)
    fine codes of all postings in the same order, packed as in the codes file
"""

from __future__ import annotations

import heapq
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import SubspaceLayout, train_pq
from .core import CodebookSet, batch_delta, code_bytes_per_vector, pack_codes, unpack_codes
from .cq import TrainConfig, encode
from .data import as_matrix
from .model import ModelFormatError, QuantizerModel, model_from_bytes, model_to_bytes
from .search import SearchResult, _result
from .training import train_model

log = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sHHIIII")
_VERSION = 1
FINE_VARIANTS = ("PQ", "CKM", "NOCQ", "SNOCQ")


class IndexCorruptionError(RuntimeError):
    pass


@dataclass
class CellCursor:
    """Lazy multi-sequence traversal over two per-half distance vectors.

    ``emitted`` holds the (i, j) cells produced so far and ``distances`` their sums.
    """

    d1: np.ndarray
    d2: np.ndarray
    emitted: list = field(default_factory=list)
    distances: list = field(default_factory=list)

    def __post_init__(self):
        self.d1 = np.asarray(self.d1, dtype=np.float64)
        self.d2 = np.asarray(self.d2, dtype=np.float64)
        # stable sorts: equal distances keep index order
        self._o1 = np.argsort(self.d1, kind="stable")
        self._o2 = np.argsort(self.d2, kind="stable")
        self._heap: list = []
        self._seen: set = set()
        if self.d1.size and self.d2.size:
            self._push(0, 0)

    def _push(self, a: int, b: int) -> None:
        if a >= self._o1.size or b >= self._o2.size or (a, b) in self._seen:
            return
        self._seen.add((a, b))
        i, j = int(self._o1[a]), int(self._o2[b])
        heapq.heappush(self._heap, (self.d1[i] + self.d2[j], i, j, a, b))

    @property
    def total(self) -> int:
        return self.d1.size * self.d2.size

    def next_cell(self):
        """Return the next (i, j, distance), or None once every cell was emitted."""
        if not self._heap:
            return None
        dist, i, j, a, b = heapq.heappop(self._heap)
        self._push(a + 1, b)
        self._push(a, b + 1)
        self.emitted.append((i, j))
        self.distances.append(float(dist))
        return i, j, float(dist)

    def advance(self, count: int) -> "CellCursor":
        for _ in range(count):
            if self.next_cell() is None:
                break
        return self

    def __iter__(self):
        while (cell := self.next_cell()) is not None:
            yield cell


def _coarse_layout(coarse: CodebookSet) -> SubspaceLayout:
    return SubspaceLayout.natural(coarse.d, 2)


def half_distances(query, coarse: CodebookSet) -> tuple[np.ndarray, np.ndarray]:
    """Squared distances between each query half and the coarse elements of that half."""
    q = np.asarray(query, dtype=np.float64).ravel()
    out = []
    for i, sl in enumerate(_coarse_layout(coarse).slices()):
        diff = q[sl][None, :] - coarse.elements[i][:, sl]
        out.append(np.einsum("kd,kd->k", diff, diff))
    return out[0], out[1]


def multi_sequence(query, coarse, max_cells: int) -> CellCursor:
    """Cursor advanced by ``max_cells`` cells, nearest coarse pairs first.

    ``coarse`` is a two-dictionary CodebookSet (or a MultiIndex); the query is split
    along the same halves the coarse quantizer was trained on.
    """
    cb = coarse.coarse if isinstance(coarse, MultiIndex) else coarse
    if cb.m != 2:
        raise ValueError("the coarse quantizer needs exactly two dictionaries")
    if not 0 <= max_cells <= cb.k * cb.k:
        raise ValueError(f"max_cells must lie in [0, {cb.k * cb.k}]")
    d1, d2 = half_distances(query, cb)
    return CellCursor(d1, d2).advance(max_cells)


@dataclass
class MultiIndex:
    coarse: CodebookSet                 # (2, Kc, D), halves embedded
    fine: QuantizerModel
    offsets: np.ndarray                 # (Kc*Kc + 1,) into postings
    postings: np.ndarray                # base ids, grouped by cell, ascending inside a cell
    fine_codes: np.ndarray              # (N, M) fine codes in postings order
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.postings = np.asarray(self.postings, dtype=np.int64)
        self.fine_codes = np.asarray(self.fine_codes, dtype=np.int64)
        kc = self.coarse.k
        if self.offsets.shape != (kc * kc + 1,) or self.offsets[0] != 0 \
                or self.offsets[-1] != self.postings.size or np.any(np.diff(self.offsets) < 0):
            raise IndexCorruptionError("cell offsets are inconsistent with the postings")
        n = self.postings.size
        if n and (self.postings.min() < 0 or self.postings.max() >= n
                  or np.unique(self.postings).size != n):
            raise IndexCorruptionError("postings must hold every id in [0, n) exactly once")
        if self.fine_codes.shape != (n, self.fine.m):
            raise IndexCorruptionError("one fine code per posting is required")
        self.position = np.empty(n, dtype=np.int64)
        self.position[self.postings] = np.arange(n)
        cells = np.repeat(np.arange(kc * kc), np.diff(self.offsets))
        self.cell_of = np.empty(n, dtype=np.int64)
        self.cell_of[self.postings] = cells
        # offline tables
        self.coarse_norms = self.coarse.norms()                   # (2, Kc)
        self.fine_norms = self.fine.codebooks.norms()             # (M, Kf)
        ce, fe = self.coarse.elements, self.fine.codebooks.elements
        self.cross = np.einsum("ikd,jld->ikjl", ce, fe)           # <c_ik, r_jl>
        self.coarse_cross = ce[0] @ ce[1].T                       # <c_1a, c_2b>

    @property
    def n(self) -> int:
        return self.postings.size

    @property
    def coarse_k(self) -> int:
        return self.coarse.k

    def cell_members(self, i: int, j: int) -> np.ndarray:
        c = i * self.coarse_k + j
        return self.postings[self.offsets[c]:self.offsets[c + 1]]

    def coarse_codes(self, ids) -> np.ndarray:
        c = self.cell_of[np.asarray(ids, dtype=np.int64)]
        return np.stack([c // self.coarse_k, c % self.coarse_k], axis=1)

    def codes_of(self, ids) -> np.ndarray:
        return self.fine_codes[self.position[np.asarray(ids, dtype=np.int64)]]

    def reconstruct(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        cc = self.coarse_codes(ids)
        out = self.coarse.elements[0][cc[:, 0]] + self.coarse.elements[1][cc[:, 1]]
        fc = self.codes_of(ids)
        for j in range(self.fine.m):
            out += self.fine.codebooks.elements[j][fc[:, j]]
        return out

    def dropped_terms(self, ids) -> np.ndarray:
        """2 c1.c2 + fine cross term, per id: what the lookup score leaves out."""
        ids = np.asarray(ids, dtype=np.int64)
        cc = self.coarse_codes(ids)
        return 2.0 * self.coarse_cross[cc[:, 0], cc[:, 1]] + batch_delta(self.fine.codebooks,
                                                                           self.codes_of(ids))


def build_multi_index(dataset, coarse_k: int = 64, fine_m: int = 4, fine_k: int = 16,
                      fine_variant: str = "NOCQ", config: TrainConfig | None = None,
                      sample_cap: int = 100_000) -> MultiIndex:
    """Coarse PQ (M=2 over the halves) plus a fine quantizer of the residuals.

    The fine model is trained on at most ``sample_cap`` residuals (the first ones);
    the rest are encoded with the trained model.
    """
    v = fine_variant.upper()
    if v not in FINE_VARIANTS:
        raise ValueError(f"fine_variant must be one of {FINE_VARIANTS}")
    x = as_matrix(dataset)
    n = x.shape[0]
    if coarse_k > n:
        raise ValueError(f"coarse_k={coarse_k} exceeds the number of points n={n}")
    cfg = config or TrainConfig()
    coarse, cc = train_pq(x, 2, coarse_k, kmeans_iters=cfg.kmeans_iters, seed=cfg.seed)
    resid = x - coarse.elements[0][cc[:, 0]] - coarse.elements[1][cc[:, 1]]

    n_train = min(n, sample_cap)
    fine = train_model(v, resid[:n_train], fine_m, fine_k, cfg)
    codes = np.empty((n, fine_m), dtype=np.int64)
    codes[:n_train] = fine.codes
    if n_train < n:
        codes[n_train:] = encode(fine, resid[n_train:])

    cell = cc[:, 0] * coarse_k + cc[:, 1]
    order = np.lexsort((np.arange(n), cell))
    offsets = np.zeros(coarse_k * coarse_k + 1, dtype=np.int64)
    np.cumsum(np.bincount(cell, minlength=coarse_k * coarse_k), out=offsets[1:])
    index = MultiIndex(coarse, fine, offsets, order, codes[order])
    spread = index.dropped_terms(np.arange(n))
    index.diagnostics.update({"dropped_terms_mean": float(spread.mean()),
                              "dropped_terms_std": float(spread.std()),
                              "fine_variant": v, "fine_mu": float(fine.mu)})
    log.info("multi-index: %d cells, dropped-term spread %.4g", coarse_k ** 2, spread.std())
    return index


def query_tables(index: MultiIndex, query) -> tuple[np.ndarray, np.ndarray]:
    """Per-query inner products with the coarse (2, Kc) and fine (M, Kf) elements."""
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != index.coarse.d:
        raise ValueError(f"query has d={q.shape[0]}, index has d={index.coarse.d}")
    return index.coarse.elements @ q, index.fine.codebooks.elements @ q


def _check_candidates(index: MultiIndex, ids: np.ndarray) -> None:
    if ids.size == 0:
        return
    if ids.min() < 0 or ids.max() >= index.n:
        raise IndexCorruptionError("candidate id outside the index")
    pos = index.position[ids]
    cell = index.cell_of[ids]
    if np.any(pos < index.offsets[cell]) or np.any(pos >= index.offsets[cell + 1]) \
            or np.any(index.postings[pos] != ids):
        raise IndexCorruptionError("candidate does not match its cell postings")


def lookup_scores(index: MultiIndex, query, candidates, tables=None) -> np.ndarray:
    """Terms two to six of the expansion for each candidate id."""
    ids = np.asarray(candidates, dtype=np.int64).ravel()
    _check_candidates(index, ids)
    qc, qr = tables if tables is not None else query_tables(index, query)
    cc = index.coarse_codes(ids)
    fc = index.codes_of(ids)
    score = np.zeros(ids.size)
    for i in range(2):
        score += index.coarse_norms[i][cc[:, i]] - 2.0 * qc[i][cc[:, i]]
    for j in range(index.fine.m):
        score += index.fine_norms[j][fc[:, j]] - 2.0 * qr[j][fc[:, j]]
        for i in range(2):
            score += 2.0 * index.cross[i, cc[:, i], j, fc[:, j]]
    return score


def rerank_multi_d_adc(index: MultiIndex, query, candidates, r: int, tables=None) -> SearchResult:
    """Top ``r`` candidates by lookup score; ``ids`` are base ids."""
    ids = np.asarray(candidates, dtype=np.int64).ravel()
    scores = lookup_scores(index, query, ids, tables)
    res = _result(scores, r)
    return SearchResult(ids[res.ids], res.scores, res.clipped)


def collect_candidates(index: MultiIndex, query, length: int, tables=None) -> np.ndarray:
    """First ``length`` ids met while visiting cells in multi-sequence order."""
    qc, _ = tables if tables is not None else query_tables(index, query)
    q = np.asarray(query, dtype=np.float64).ravel()
    # half distances from the inner products already needed for reranking
    d = []
    for i, sl in enumerate(_coarse_layout(index.coarse).slices()):
        d.append(float(q[sl] @ q[sl]) - 2.0 * qc[i] + index.coarse_norms[i])
    cursor = CellCursor(d[0], d[1])
    got, total = [], 0
    for i, j, _ in cursor:
        members = index.cell_members(i, j)
        if members.size:
            got.append(members)
            total += members.size
            if total >= length:
                break
    if not got:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(got)[:length]


def multi_index_search(index: MultiIndex, queries, length: int, r: int) -> np.ndarray:
    """(Q, r) ids; rows are padded with -1 when fewer than r candidates exist."""
    q = as_matrix(queries)
    out = np.full((q.shape[0], r), -1, dtype=np.int64)
    for row, query in enumerate(q):
        tables = query_tables(index, query)
        cand = collect_candidates(index, query, length, tables)
        res = rerank_multi_d_adc(index, query, cand, r, tables)
        out[row, :res.ids.size] = res.ids
    return out


# ------------------------------------------------------------------ file format

def _varint(values: np.ndarray) -> bytes:
    out = bytearray()
    for v in values.tolist():
        while v >= 0x80:
            out.append((v & 0x7F) | 0x80)
            v >>= 7
        out.append(v)
    return bytes(out)


def _read_varints(buf: bytes, off: int, count: int) -> tuple[list[int], int]:
    vals = []
    for _ in range(count):
        v = shift = 0
        while True:
            if off >= len(buf):
                raise ModelFormatError("index file truncated inside postings")
            byte = buf[off]
            off += 1
            v |= (byte & 0x7F) << shift
            shift += 7
            if not byte & 0x80:
                break
        vals.append(v)
    return vals, off


def index_to_bytes(index: MultiIndex) -> bytes:
    coarse_model = QuantizerModel("PQ", index.coarse)
    cblob, fblob = model_to_bytes(coarse_model), model_to_bytes(index.fine)
    kc = index.coarse_k
    parts = [_HEADER.pack(b"VQMI", _VERSION, 0, kc, index.n, len(cblob), len(fblob)), cblob, fblob]
    for c in range(kc * kc):
        ids = index.postings[index.offsets[c]:index.offsets[c + 1]]
        gaps = np.diff(np.concatenate([[-1], ids]))
        parts.append(_varint(np.array([ids.size])))
        parts.append(_varint(gaps))
    parts.append(pack_codes(index.fine_codes, index.fine.k))
    return b"".join(parts)


def index_from_bytes(buf: bytes) -> MultiIndex:
    if len(buf) < _HEADER.size:
        raise ModelFormatError("index file too short")
    magic, version, _, kc, n, clen, flen = _HEADER.unpack_from(buf, 0)
    if magic != b"VQMI":
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise ModelFormatError(f"unsupported index version {version}")
    off = _HEADER.size
    if off + clen + flen > len(buf):
        raise ModelFormatError("index file truncated")
    coarse = model_from_bytes(buf[off:off + clen]).codebooks
    fine = model_from_bytes(buf[off + clen:off + clen + flen])
    off += clen + flen
    offsets = np.zeros(kc * kc + 1, dtype=np.int64)
    postings = []
    for c in range(kc * kc):
        (count,), off = _read_varints(buf, off, 1)
        gaps, off = _read_varints(buf, off, count)
        postings.append(np.cumsum(gaps, dtype=np.int64) - 1)
        offsets[c + 1] = offsets[c] + count
    per = code_bytes_per_vector(fine.m, fine.k)
    if off + n * per > len(buf):
        raise ModelFormatError("index file truncated inside fine codes")
    codes = unpack_codes(buf[off:off + n * per], n, fine.m, fine.k)
    ids = np.concatenate(postings) if postings else np.zeros(0, dtype=np.int64)
    return MultiIndex(coarse, fine, offsets, ids, codes)


def save_index(index: MultiIndex, path) -> None:
    Path(path).write_bytes(index_to_bytes(index))


def load_index(path) -> MultiIndex:
    return index_from_bytes(Path(path).read_bytes())
