"""Composite quantization trainers: CQ, OCQ and NOCQ.

All three alternate between re-encoding every vector by ICM and updating the
dictionaries with everything else fixed. NOCQ also re-estimates the constant
epsilon in closed form between the two. Each block update is a descent step for
the objective it optimizes, so ``train_log`` is nonincreasing.

Objectives, for codes y_n selecting elements c_{m,k_nm}::

    CQ    sum_n ||x_n - xbar_n||^2
    NOCQ  sum_n ||x_n - xbar_n||^2 + mu * sum_n (delta_n - epsilon)^2
    OCQ   sum_n ||x_n - xbar_n||^2 + mu * sum_{i != j} ||C_i^T C_j||_F^2
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np
from scipy import sparse as sp

from .baselines import train_pq
from .core import (CodebookSet, build_inner_product_cache, greedy_init, icm_encode_batch,
                   quantization_error)
from .data import as_matrix, brute_force_groundtruth
from .model import QuantizerModel
from .search import adc_search, recall_at_r
from .solvers import LbfgsConfig, OptimizationError, lbfgs_minimize

log = logging.getLogger(__name__)

DEFAULT_MU_SCALES = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mu: float | None = None          # None: select by validation
    mu_grid: Sequence[float] | None = None          # explicit grid; overrides mu_scales
    mu_scales: Sequence[float] = DEFAULT_MU_SCALES  # grid = 0 plus these, rescaled
    outer_iters: int = 30
    rel_tol: float = 1e-5
    icm_sweeps: int = 1
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    seed: int = 0
    validation_fraction: float = 0.1
    validation_max_queries: int | None = 1000
    select_outer_iters: int | None = None   # outer iterations per grid point; None = outer_iters
    kmeans_iters: int = 25
    c_update: Literal["lbfgs", "closed_form"] = "lbfgs"

    def __post_init__(self):
        if self.mu is not None and self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.outer_iters < 0:
            raise ValueError("outer_iters must be nonnegative")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")


# ------------------------------------------------------------------ objectives

def assignment_matrix(codes: np.ndarray, k: int) -> sp.csr_matrix:
    """(M*K) x N sparse indicator: row m*K + k has a one for every point using c_mk."""
    n, m = codes.shape
    rows = (codes + k * np.arange(m)[None, :]).ravel()
    cols = np.repeat(np.arange(n), m)
    return sp.csr_matrix((np.ones(n * m), (rows, cols)), shape=(m * k, n))


class PenaltyObjective:
    """phi and its gradient w.r.t. the flattened (M, K, D) codebook tensor, for fixed
    codes and epsilon. ``kind`` selects the NOCQ ("near") or OCQ ("orth") penalty."""

    def __init__(self, x, codes, m: int, k: int, mu: float = 0.0, epsilon: float = 0.0,
                 kind: Literal["near", "orth"] = "near"):
        self.x = as_matrix(x)
        self.codes = np.asarray(codes, dtype=np.int64)
        self.m, self.k, self.d = m, k, self.x.shape[1]
        self.mu, self.epsilon, self.kind = float(mu), float(epsilon), kind
        self.y = assignment_matrix(self.codes, k)
        self.yt = self.y.T.tocsr()
        self.flat_idx = self.codes + k * np.arange(m)[None, :]

    def parts(self, elements) -> dict:
        flat = np.asarray(elements, dtype=np.float64).reshape(self.m * self.k, self.d)
        xbar = self.yt @ flat
        resid = xbar - self.x
        err = float(np.einsum("nd,nd->", resid, resid))
        out = {"flat": flat, "xbar": xbar, "resid": resid, "error": err}
        if self.kind == "near":
            norms = np.einsum("kd,kd->k", flat, flat)
            delta = np.einsum("nd,nd->n", xbar, xbar) - norms[self.flat_idx].sum(1)
            dev = delta - self.epsilon
            out["delta"], out["dev"] = delta, dev
            out["penalty"] = float(dev @ dev)
        else:
            e = flat.reshape(self.m, self.k, self.d)
            grams = np.einsum("mkd,mke->mde", e, e)        # E_m^T E_m
            total = grams.sum(0)
            # sum_{i != j} ||E_i E_j^T||_F^2 = sum_{i != j} <G_i, G_j>
            pen = float(np.einsum("de,de->", total, total) - np.einsum("mde,mde->", grams, grams))
            out["grams"], out["total_gram"] = grams, total
            out["penalty"] = max(pen, 0.0)
        out["value"] = err + self.mu * out["penalty"]
        return out

    def value(self, elements) -> float:
        return self.parts(elements)["value"]

    def diag_hessian(self, elements) -> np.ndarray:
        """Exact diagonal of the Hessian of phi w.r.t. the codebook entries.

        Entries of elements no point uses get 1 (their gradient is zero anyway
        unless the OCQ penalty touches them, where its own curvature is added).
        """
        e = np.asarray(elements, dtype=np.float64).reshape(self.m, self.k, self.d)
        p = self.parts(e)
        h = np.empty_like(e)
        for m in range(self.m):
            idx = self.codes[:, m]
            counts = np.bincount(idx, minlength=self.k)[:, None]
            if self.kind == "near" and self.mu:
                a = p["xbar"] - e[m][idx]
                acc = self.y[m * self.k:(m + 1) * self.k] @ (a * a)
                h[m] = 2.0 * counts + 8.0 * self.mu * acc
            else:
                h[m] = 2.0 * counts
                if self.kind == "orth" and self.mu:
                    others = p["total_gram"] - p["grams"][m]
                    h[m] += 4.0 * self.mu * np.diag(others)[None, :]
        h[h <= 0] = 1.0
        return h.ravel()

    def __call__(self, theta):
        p = self.parts(theta)
        flat = p["flat"]
        if self.kind == "near":
            v = 2.0 * p["resid"]
            if self.mu:
                v += (4.0 * self.mu * p["dev"])[:, None] * p["xbar"]
            grad = self.y @ v
            if self.mu:
                grad -= (4.0 * self.mu) * flat * (self.y @ p["dev"])[:, None]
        else:
            grad = self.y @ (2.0 * p["resid"])
            if self.mu:
                e = flat.reshape(self.m, self.k, self.d)
                others = p["total_gram"][None] - p["grams"]
                grad += 4.0 * self.mu * np.einsum("mkd,mde->mke", e, others).reshape(flat.shape)
        return p["value"], grad.ravel()


def orthogonality_residual(codebooks) -> float:
    """sqrt(sum_{i != j} ||C_i^T C_j||_F^2)."""
    e = codebooks.elements if isinstance(codebooks, CodebookSet) else np.asarray(codebooks)
    grams = np.einsum("mkd,mke->mde", e, e)
    total = grams.sum(0)
    pen = np.einsum("de,de->", total, total) - np.einsum("mde,mde->", grams, grams)
    return float(np.sqrt(max(pen, 0.0)))


def update_epsilon(codebooks, codes) -> float:
    """Closed-form minimizer over epsilon: the mean cross term of the codes."""
    c = np.atleast_2d(codes)
    if c.shape[0] == 0:
        raise ValueError("need at least one code")
    return float(np.mean(build_inner_product_cache(codebooks).delta(c)))


def closed_form_update(x, codes, k: int) -> np.ndarray:
    """Least-squares dictionaries for fixed codes.

    The Gram matrix Y Y^T is always singular for M >= 2 (each dictionary's indicator
    rows sum to the all-ones vector), so the minimum-norm solution of the normal
    equations is used.
    """
    x = as_matrix(x)
    n, m = codes.shape
    y = assignment_matrix(codes, k)
    gram = (y @ y.T).toarray()
    rhs = y @ x
    sol, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
    return sol.reshape(m, k, x.shape[1])


# --------------------------------------------------------------------- training

def _warm_start(x, m, k, config):
    cb, codes = train_pq(x, m, k, kmeans_iters=config.kmeans_iters, seed=config.seed)
    return cb.elements.copy(), codes


def _alternate(x, m, k, config: TrainConfig, mu: float, kind: str, variant: str,
               init=None) -> QuantizerModel:
    x = as_matrix(x)
    n = x.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")
    elements, codes = _warm_start(x, m, k, config) if init is None else init
    elements = np.array(elements, dtype=np.float64)
    codes = np.array(codes, dtype=np.int64)
    near = kind == "near"
    eps = update_epsilon(elements, codes) if near and mu else 0.0
    obj_kind = "orth" if kind == "orth" else "near"
    phi = PenaltyObjective(x, codes, m, k, mu if kind != "none" else 0.0, eps, obj_kind).value(elements)
    train_log = [phi]
    errors = [quantization_error(elements, codes, x)]
    diag: dict = {"error_log": errors}
    if kind == "orth":
        diag["orth_residual_log"] = [orthogonality_residual(elements)]
    if near:
        diag["mean_abs_dev_log"] = []

    for it in range(config.outer_iters):
        icm_mu = mu if near else 0.0
        codes = icm_encode_batch(elements, x, icm_mu, eps, codes, config.icm_sweeps)
        if near and mu:
            eps = update_epsilon(elements, codes)
        objective = PenaltyObjective(x, codes, m, k, mu if kind != "none" else 0.0, eps, obj_kind)
        before = objective.value(elements)
        if kind == "none" and config.c_update == "closed_form":
            cand = closed_form_update(x, codes, k)
            if objective.value(cand) <= before:
                elements = cand
            value = objective.value(elements)
        else:
            try:
                res = lbfgs_minimize(objective, elements.ravel(), config.lbfgs,
                                     h0_diag=1.0 / objective.diag_hessian(elements))
            except OptimizationError as exc:
                raise TrainingError(f"{variant} iteration {it}: {exc} (phi before update {before:.6g})") from exc
            elements = res.point.reshape(m, k, x.shape[1])
            value = res.value
        if not np.isfinite(value):
            raise TrainingError(f"{variant} iteration {it}: non-finite objective")
        prev = train_log[-1]
        train_log.append(value)
        errors.append(quantization_error(elements, codes, x))
        if kind == "orth":
            diag["orth_residual_log"].append(orthogonality_residual(elements))
        if near:
            p = objective.parts(elements)
            diag["mean_abs_dev_log"].append(float(np.mean(np.abs(p["delta"] - eps))))
        log.debug("%s iter %d: phi=%.6g error=%.6g", variant, it, value, errors[-1])
        if prev > 0 and (prev - value) / prev < config.rel_tol:
            break
    diag["iterations"] = len(train_log) - 1
    return QuantizerModel(variant, CodebookSet(elements), eps if near else 0.0, None,
                          train_log, float(mu), diag, codes)


def train_cq(dataset, m: int, k: int, config: TrainConfig | None = None, init=None) -> QuantizerModel:
    """Unconstrained composite quantization (quantization error only)."""
    return _alternate(dataset, m, k, config or TrainConfig(), 0.0, "none", "CQ", init)


def default_mu_grid(dataset, m: int, k: int, config: TrainConfig, kind: str = "near") -> list[float]:
    """0 plus ``config.mu_scales`` divided by the per-vector PQ warm-start error.

    Dividing makes mu * (delta - eps)^2 commensurate with the per-vector error. The
    OCQ penalty sums K^2 element pairs per dictionary pair instead of N per-point
    terms, so its grid is additionally scaled by N / K^2.
    """
    x = as_matrix(dataset)
    elements, codes = _warm_start(x, m, k, config)
    per_vec = quantization_error(elements, codes, x) / x.shape[0]
    scale = 1.0 / max(per_vec, 1e-300)
    if kind == "orth":
        scale *= x.shape[0] / (k * k)
    return [0.0] + [s * scale for s in config.mu_scales]


def validation_recall(model: QuantizerModel, base, queries_idx, gt) -> float:
    """Mean recall@T with R = T over T in {5, 10, ..., 100}."""
    x = as_matrix(base)
    ts = [t for t in range(5, 101, 5) if t <= gt.shape[1]] or [gt.shape[1]]
    ids, _ = adc_search(model, x[queries_idx], model.codes, max(ts))
    return float(np.mean([recall_at_r(ids, gt, t, t) for t in ts]))


def _validation_split(n: int, config: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0x7A1])
    count = max(1, int(round(config.validation_fraction * n)))
    if config.validation_max_queries:
        count = min(count, config.validation_max_queries)
    return np.sort(rng.choice(n, size=count, replace=False))


def select_mu(dataset, m: int, k: int, config: TrainConfig | None = None,
              kind: Literal["near", "orth"] = "near", return_scores: bool = False):
    """Pick mu from the grid by validation recall (ties go to the smaller mu)."""
    config = config or TrainConfig()
    x = as_matrix(dataset)
    grid = list(config.mu_grid) if config.mu_grid is not None else default_mu_grid(x, m, k, config, kind)
    if not grid:
        raise ValueError("mu grid is empty")
    if len(grid) == 1 and not return_scores:
        return float(grid[0])
    q_idx = _validation_split(x.shape[0], config)
    gt = brute_force_groundtruth(x, x[q_idx], min(100, x.shape[0])).neighbors
    sub = replace(config, outer_iters=config.select_outer_iters or config.outer_iters)
    scores = {}
    for mu in sorted(grid):
        trainer = train_ocq if kind == "orth" else train_nocq
        model = trainer(x, m, k, replace(sub, mu=float(mu)))
        scores[float(mu)] = validation_recall(model, x, q_idx, gt)
        log.info("select_mu(%s): mu=%.4g recall=%.4f", kind, mu, scores[float(mu)])
    best_mu = max(sorted(scores), key=lambda mu: (scores[mu], -mu))
    return (best_mu, scores) if return_scores else best_mu


def train_nocq(dataset, m: int, k: int, config: TrainConfig | None = None, init=None) -> QuantizerModel:
    """Near-orthogonal CQ by the quadratic penalty method, warm-started from PQ."""
    config = config or TrainConfig()
    mu = config.mu
    selection = None
    if mu is None:
        mu, selection = select_mu(dataset, m, k, config, "near", return_scores=True)
    model = _alternate(dataset, m, k, config, float(mu), "near", "NOCQ", init)
    if selection is not None:
        model.diagnostics["mu_selection"] = {repr(k_): v for k_, v in selection.items()}
    return model


def train_ocq(dataset, m: int, k: int, config: TrainConfig | None = None, init=None) -> QuantizerModel:
    """Orthogonal CQ: Frobenius penalty on cross-dictionary inner products, epsilon = 0."""
    config = config or TrainConfig()
    mu = config.mu
    selection = None
    if mu is None:
        mu, selection = select_mu(dataset, m, k, config, "orth", return_scores=True)
    model = _alternate(dataset, m, k, config, float(mu), "orth", "OCQ", init)
    if selection is not None:
        model.diagnostics["mu_selection"] = {repr(k_): v for k_, v in selection.items()}
    return model


def encode(model: QuantizerModel, data, sweeps: int = 3) -> np.ndarray:
    """Encode new vectors: greedy initialization followed by ICM sweeps."""
    x = as_matrix(data)
    if x.shape[1] != model.d:
        raise ValueError(f"data has d={x.shape[1]}, model has d={model.d}")
    cb = model.codebooks
    return icm_encode_batch(cb, x, model.encode_mu, model.epsilon, greedy_init(cb, x), sweeps)
