"""Query-side engine: lookup tables, linear scans and evaluation metrics."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .core import CodebookSet, batch_delta, greedy_init, icm_encode_batch, reconstruct
from .data import GroundTruth, as_matrix
from .model import QuantizerModel

TableKind = Literal["squared_euclidean", "inner_product"]


@dataclass(frozen=True)
class DistanceTable:
    entries: np.ndarray          # (M, K)
    kind: TableKind = "squared_euclidean"
    ops: int = 0                 # multiply-adds spent building the table


@dataclass(frozen=True)
class SearchResult:
    ids: np.ndarray
    scores: np.ndarray
    clipped: bool = False


def _codebooks(model) -> CodebookSet:
    if isinstance(model, QuantizerModel):
        return model.codebooks
    if isinstance(model, CodebookSet):
        return model
    return CodebookSet(model)


def _check_query(cb: CodebookSet, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.shape[0] != cb.d:
        raise ValueError(f"query has d={q.shape[0]}, model has d={cb.d}")
    return q


def _sparse_layout(cb: CodebookSet):
    flat = cb.elements.reshape(cb.m * cb.k, cb.d)
    rows, cols = np.nonzero(flat)
    return rows, cols, flat[rows, cols]


def build_distance_table(model, query, kind: TableKind = "squared_euclidean",
                         sparse: bool | None = None) -> DistanceTable:
    """M x K table of ||q - c_mk||^2 (or <q, c_mk>).

    The dense path costs M*K*D multiply-adds. The sparse path touches only nonzero
    codebook entries (one multiply-add each) and adds precomputed element norms.
    ``sparse=None`` picks the sparse path when under half of the entries are nonzero.
    """
    cb = _codebooks(model)
    q = _check_query(cb, query)
    e = cb.elements
    size = e.size
    if sparse is None:
        sparse = cb.nnz < size // 2
    if not sparse:
        if kind == "squared_euclidean":
            diff = q[None, None, :] - e
            entries = np.einsum("mkd,mkd->mk", diff, diff)
        else:
            entries = e @ q
        return DistanceTable(entries, kind, size)
    rows, cols, vals = _sparse_layout(cb)
    ip = np.bincount(rows, weights=vals * q[cols], minlength=cb.m * cb.k).reshape(cb.m, cb.k)
    if kind == "inner_product":
        return DistanceTable(ip, kind, rows.size)
    entries = float(q @ q) - 2.0 * ip + cb.norms()
    return DistanceTable(entries, kind, rows.size)


def table_scores(table: DistanceTable, codes) -> np.ndarray:
    """Sum of M table lookups per code."""
    c = np.asarray(codes, dtype=np.int64)
    t = table.entries
    out = np.zeros(c.shape[0])
    for m in range(t.shape[0]):
        out += t[m][c[:, m]]
    return out


def top_r(scores: np.ndarray, r: int, descending: bool = False) -> np.ndarray:
    """Indices of the best ``r`` scores; ties go to the lower index."""
    key = -scores if descending else scores
    n = key.shape[0]
    if r >= n:
        return np.lexsort((np.arange(n), key))
    part = np.argpartition(key, r - 1)[:r]
    cand = np.flatnonzero(key <= key[part].max())
    return cand[np.lexsort((cand, key[cand]))][:r]


def _result(scores, r, descending=False) -> SearchResult:
    n = scores.shape[0]
    clipped = r > n
    ids = top_r(scores, min(r, n), descending)
    return SearchResult(ids, scores[ids], clipped)


def adc_scan(model, table: DistanceTable, codes, r: int) -> SearchResult:
    """Rank by the sum of table lookups. Neither (M-1)||q||^2 nor epsilon is added."""
    return _result(table_scores(table, codes), r, descending=table.kind == "inner_product")


def reconstruction_scan(model, query, codes, r: int, include_delta: bool = True,
                        deltas=None) -> SearchResult:
    """Rank by ||q - xbar||^2 through the table path.

    With ``include_delta`` the per-point cross term is added back (stored ``deltas``
    if given, else recomputed from the model); without it the term is discarded.
    """
    cb = _codebooks(model)
    q = _check_query(cb, query)
    table = build_distance_table(cb, q)
    scores = table_scores(table, codes) - (cb.m - 1) * float(q @ q)
    if include_delta:
        scores = scores + (batch_delta(cb, codes) if deltas is None else np.asarray(deltas))
    return _result(scores, r)


def exact_reconstruction_scan(model, query, codes, r: int) -> SearchResult:
    """Rank by explicitly reconstructing every database vector."""
    cb = _codebooks(model)
    q = _check_query(cb, query)
    diff = reconstruct(cb, codes) - q
    return _result(np.einsum("nd,nd->n", diff, diff), r)


def inner_product_scan(model, query, codes, r: int) -> SearchResult:
    """Top ``r`` by descending sum of <q, c_{m,k_m}>."""
    table = build_distance_table(model, query, kind="inner_product")
    return adc_scan(model, table, codes, r)


def encode_query(model, query, sweeps: int = 3) -> np.ndarray:
    """Compact code for a query using the unconstrained (mu = 0) encoder."""
    cb = _codebooks(model)
    q = _check_query(cb, query)[None, :]
    return icm_encode_batch(cb, q, 0.0, 0.0, greedy_init(cb, q), sweeps)[0]


def compressed_query_search(model, query, base_codes, r: int) -> SearchResult:
    """Search with the reconstruction of the query's own compact code."""
    cb = _codebooks(model)
    q_bar = reconstruct(cb, encode_query(cb, query))
    return adc_scan(model, build_distance_table(cb, q_bar), base_codes, r)


def _batch_tables(cb: CodebookSet, queries: np.ndarray, kind: TableKind) -> np.ndarray:
    e = cb.elements
    ip = np.einsum("qd,mkd->qmk", queries, e)
    if kind == "inner_product":
        return ip
    return (queries * queries).sum(1)[:, None, None] - 2.0 * ip + cb.norms()[None]


def adc_search(model, queries, codes, r: int, kind: TableKind = "squared_euclidean",
               threads: int = 1, chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Batch ADC: returns (ids, scores), each (Q, min(r, N)).

    Tables use the norm expansion, so scores can differ from :func:`adc_scan` in the
    last bits; the ranking contract (ties to the lower id) is the same.
    """
    cb = _codebooks(model)
    q = as_matrix(queries)
    if q.shape[1] != cb.d:
        raise ValueError(f"queries have d={q.shape[1]}, model has d={cb.d}")
    c = np.asarray(codes, dtype=np.int64)
    r_eff = min(r, c.shape[0])
    ids = np.empty((q.shape[0], r_eff), dtype=np.int64)
    scores = np.empty((q.shape[0], r_eff))
    desc = kind == "inner_product"

    def work(sl):
        tables = _batch_tables(cb, q[sl], kind)
        s = np.zeros((tables.shape[0], c.shape[0]))
        for m in range(cb.m):
            s += tables[:, m, :][:, c[:, m]]
        for i, row in enumerate(s):
            best = top_r(row, r_eff, desc)
            ids[sl.start + i] = best
            scores[sl.start + i] = row[best]

    slices = [slice(s, min(s + chunk, q.shape[0])) for s in range(0, q.shape[0], chunk)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, slices))
    else:
        for sl in slices:
            work(sl)
    return ids, scores


def _ids_matrix(results) -> list[np.ndarray]:
    if isinstance(results, np.ndarray):
        return [np.asarray(row) for row in results]
    return [np.asarray(res.ids if isinstance(res, SearchResult) else res) for res in results]


def _gt_matrix(gt) -> np.ndarray:
    return gt.neighbors if isinstance(gt, GroundTruth) else np.asarray(gt)


def recall_at_r(results, gt, t: int, r: int) -> float:
    """Mean over queries of |top-r retrieved  intersect  top-t true| / t."""
    rows = _ids_matrix(results)
    truth = _gt_matrix(gt)
    if t > truth.shape[1]:
        raise ValueError(f"t={t} exceeds ground-truth width {truth.shape[1]}")
    if len(rows) != truth.shape[0]:
        raise ValueError("one result list per ground-truth row is required")
    total = 0.0
    for ids, true in zip(rows, truth):
        total += np.intersect1d(ids[:r], true[:t]).size / t
    return total / len(rows)


def average_precision(ranked, relevant) -> float:
    """Sum over ranks t of precision(t) * (recall(t) - recall(t-1))."""
    rel = np.isin(np.asarray(ranked), np.asarray(relevant))
    if not len(relevant):
        return 0.0
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, rel.size + 1)
    return float((precision * rel).sum() / len(relevant))


def mean_average_precision(results, gt, t_relevant: int = 100) -> float:
    rows = _ids_matrix(results)
    truth = _gt_matrix(gt)
    t = min(t_relevant, truth.shape[1])
    return float(np.mean([average_precision(ids, true[:t]) for ids, true in zip(rows, truth)]))


def recall_curve(ids: np.ndarray, gt, ts: Sequence[int], rs: Sequence[int]) -> dict:
    """{(T, R): recall} for every T in ts and R in rs that the inputs can support."""
    truth = _gt_matrix(gt)
    out = {}
    for t in ts:
        if t > truth.shape[1]:
            continue
        for r in rs:
            if r <= ids.shape[1]:
                out[(t, r)] = recall_at_r(ids, truth, t, r)
    return out
