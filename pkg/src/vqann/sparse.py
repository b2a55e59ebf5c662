"""Sparse NOCQ: dictionaries with at most S nonzero entries in total.

Two steps, both by exact coordinate descent over scalar entries c_mkd:

1. minimize phi + lambda * ||C||_1 with soft-thresholding updates;
2. keep the S largest-magnitude entries, zero the rest, and refit the kept
   entries with the unregularized coordinate update.

Restricted to one entry, with everything else fixed, phi is the 1-d quadratic
``0.5 * alpha * c^2 + beta * c + const`` where, over the points n assigned to
element (m, k),

    a_nd  = xbar_nd - c_mkd                 (other dictionaries' contribution)
    b_nd  = delta_n - epsilon - 2 a_nd c_mkd (deviation without this entry)
    alpha = sum (2 + 8 mu a_nd^2)
    beta  = sum (2 a_nd - 2 x_nd + 4 mu a_nd b_nd)

since delta_n - epsilon = 2 a_nd c_mkd + b_nd exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .baselines import train_pq
from .core import CodebookSet, batch_delta, icm_encode_batch, quantization_error, reconstruct
from .cq import TrainConfig, TrainingError, _validation_split, select_mu, validation_recall
from .data import as_matrix, brute_force_groundtruth
from .model import QuantizerModel

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_SCALES = (1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class SparseConfig(TrainConfig):
    s_budget: int | None = None      # None: K * D
    lam: float | None = 0.0          # None: select by validation
    lam_grid: tuple | None = None
    l1_iters: int = 10
    cd_sweeps: int = 3               # coordinate passes per outer iteration

    def __post_init__(self):
        super().__post_init__()
        if self.cd_sweeps < 1:
            raise ValueError("cd_sweeps must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be nonnegative")


def soft_threshold_update(alpha: float, beta: float, lam: float) -> float:
    """argmin_c 0.5 * alpha * c^2 + beta * c + lam * |c|."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    t = -beta / alpha
    thr = lam / alpha
    if t > thr:
        return t - thr
    if t < -thr:
        return t + thr
    return 0.0


def _soft_threshold(alpha, beta, lam):
    t = -beta / alpha
    return np.sign(t) * np.maximum(np.abs(t) - lam / alpha, 0.0)


def sparse_coefficients(codebooks, m_idx: int, k_idx: int, d_idx: int, codes, dataset,
                        epsilon: float, mu: float) -> tuple[float, float]:
    """(alpha, beta) of phi restricted to entry c_{m_idx, k_idx, d_idx}.

    Computed from scratch; alpha is 0 when no point uses element (m_idx, k_idx).
    """
    e = codebooks.elements if isinstance(codebooks, CodebookSet) else np.asarray(codebooks)
    x = as_matrix(dataset)
    c = np.asarray(codes, dtype=np.int64)
    pts = np.flatnonzero(c[:, m_idx] == k_idx)
    if pts.size == 0:
        return 0.0, 0.0
    cur = e[m_idx, k_idx, d_idx]
    a = reconstruct(e, c[pts])[:, d_idx] - cur
    b = batch_delta(e, c[pts]) - epsilon - 2.0 * a * cur
    alpha = float(np.sum(2.0 + 8.0 * mu * a * a))
    beta = float(np.sum(2.0 * a - 2.0 * x[pts, d_idx] + 4.0 * mu * a * b))
    return alpha, beta


def sparse_objective(elements, x, codes, mu: float, epsilon: float, lam: float = 0.0) -> float:
    e = np.asarray(elements)
    r = as_matrix(x) - reconstruct(e, codes)
    dev = batch_delta(e, codes) - epsilon
    return float(np.einsum("nd,nd->", r, r) + mu * dev @ dev + lam * np.abs(e).sum())


def coordinate_sweep(elements: np.ndarray, x: np.ndarray, codes: np.ndarray, mu: float,
                     epsilon: float, lam: float = 0.0, support: np.ndarray | None = None) -> np.ndarray:
    """One lexicographic pass over all entries, updated in place.

    Entries of one dictionary and dimension touch disjoint point sets, so for a
    fixed (m, d) the K updates are done together; the result matches a sequential
    (m, k, d) sweep. Entries of elements no point uses are skipped. With
    ``support`` given, entries outside it are left untouched.
    """
    M, K, D = elements.shape
    xbar = reconstruct(elements, codes)
    dev = batch_delta(elements, codes) - epsilon
    for m in range(M):
        idx = codes[:, m]
        counts = np.bincount(idx, minlength=K)
        live = counts > 0
        for d in range(D):
            cur = elements[m, :, d]
            a = xbar[:, d] - cur[idx]
            b = dev - 2.0 * a * cur[idx]
            alpha = np.bincount(idx, 2.0 + 8.0 * mu * a * a, minlength=K)
            beta = np.bincount(idx, 2.0 * a - 2.0 * x[:, d] + 4.0 * mu * a * b, minlength=K)
            mask = live.copy()
            if support is not None:
                mask &= support[m, :, d]
            new = cur.copy()
            new[mask] = _soft_threshold(alpha[mask], beta[mask], lam)
            step = new - cur
            if not np.any(step):
                continue
            elements[m, :, d] = new
            moved = step[idx]
            xbar[:, d] += moved
            dev += 2.0 * a * moved
    return elements


def support_mask(elements: np.ndarray, s_budget: int) -> np.ndarray:
    """Boolean mask of the ``s_budget`` largest-magnitude entries (ties: lower flat index)."""
    flat = np.abs(elements).ravel()
    keep = min(s_budget, int(np.count_nonzero(flat)))
    order = np.lexsort((np.arange(flat.size), -flat))[:keep]
    mask = np.zeros(flat.size, dtype=bool)
    mask[order] = True
    return mask.reshape(elements.shape)


def _epsilon(elements, codes) -> float:
    return float(np.mean(batch_delta(elements, codes)))


def default_lambda_grid(x, m: int, k: int, config: TrainConfig) -> list[float]:
    """0 plus DEFAULT_LAMBDA_SCALES times (N / K) * rms per-dimension PQ error.

    For one entry alpha is about 2 N / K, so lambda / alpha, the soft threshold,
    is then a fraction of the per-dimension error scale.
    """
    cb, codes = train_pq(x, m, k, kmeans_iters=config.kmeans_iters, seed=config.seed)
    n, d = x.shape
    rms = np.sqrt(quantization_error(cb, codes, x) / (n * d))
    return [0.0] + [s * (n / k) * rms for s in DEFAULT_LAMBDA_SCALES]


def _train(x, m, k, config: SparseConfig, mu: float, lam: float) -> QuantizerModel:
    n, d = x.shape
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")
    s_budget = config.s_budget if config.s_budget is not None else k * d
    if s_budget < d:
        raise ValueError("s_budget must be at least D")
    cb, codes = train_pq(x, m, k, kmeans_iters=config.kmeans_iters, seed=config.seed)
    elements = cb.elements.copy()
    eps = _epsilon(elements, codes)

    l1_log = [sparse_objective(elements, x, codes, mu, eps, lam)]
    for _ in range(config.l1_iters):
        eps = _epsilon(elements, codes)
        for _ in range(config.cd_sweeps):
            coordinate_sweep(elements, x, codes, mu, eps, lam)
        codes = icm_encode_batch(elements, x, mu, eps, codes, config.icm_sweeps)
        l1_log.append(sparse_objective(elements, x, codes, mu, eps, lam))
        if not np.isfinite(l1_log[-1]):
            raise TrainingError("SNOCQ: non-finite objective in the L1 step")
        if l1_log[-2] > 0 and (l1_log[-2] - l1_log[-1]) / l1_log[-2] < config.rel_tol:
            break

    support = support_mask(elements, s_budget)
    elements[~support] = 0.0
    train_log = [sparse_objective(elements, x, codes, mu, eps)]
    for _ in range(config.outer_iters):
        eps = _epsilon(elements, codes)
        for _ in range(config.cd_sweeps):
            coordinate_sweep(elements, x, codes, mu, eps, 0.0, support)
        codes = icm_encode_batch(elements, x, mu, eps, codes, config.icm_sweeps)
        train_log.append(sparse_objective(elements, x, codes, mu, eps))
        if not np.isfinite(train_log[-1]):
            raise TrainingError("SNOCQ: non-finite objective in the refit step")
        if train_log[-2] > 0 and (train_log[-2] - train_log[-1]) / train_log[-2] < config.rel_tol:
            break
    elements[~support] = 0.0
    diag = {"l1_log": l1_log, "s_budget": int(s_budget), "lambda": float(lam),
            "nnz": int(np.count_nonzero(elements)),
            "error": quantization_error(elements, codes, x)}
    return QuantizerModel("SNOCQ", CodebookSet(elements), eps, None, train_log, float(mu), diag, codes)


def select_lambda(dataset, m: int, k: int, config: SparseConfig, mu: float,
                  return_scores: bool = False):
    """Pick lambda by validation recall, like :func:`select_mu` (ties: smaller lambda)."""
    x = as_matrix(dataset)
    grid = list(config.lam_grid) if config.lam_grid is not None else default_lambda_grid(x, m, k, config)
    q_idx = _validation_split(x.shape[0], config)
    gt = brute_force_groundtruth(x, x[q_idx], min(100, x.shape[0])).neighbors
    sub = replace(config, outer_iters=config.select_outer_iters or config.outer_iters)
    scores = {}
    for lam in sorted(grid):
        scores[float(lam)] = validation_recall(_train(x, m, k, sub, mu, float(lam)), x, q_idx, gt)
    best = max(sorted(scores), key=lambda v: (scores[v], -v))
    return (best, scores) if return_scores else best


def train_snocq(dataset, m: int, k: int, config: SparseConfig | None = None) -> QuantizerModel:
    config = config or SparseConfig()
    x = as_matrix(dataset)
    mu = config.mu if config.mu is not None else select_mu(x, m, k, config, "near")
    lam = config.lam if config.lam is not None else select_lambda(x, m, k, config, mu)
    return _train(x, m, k, config, float(mu), float(lam))
