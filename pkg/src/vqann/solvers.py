"""Generic numerical machinery: Lloyd's k-means and an L-BFGS minimizer."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import as_matrix


class OptimizationError(RuntimeError):
    """Non-finite objective or gradient. ``last_point`` is the last finite iterate."""

    def __init__(self, message: str, last_point: np.ndarray, last_value: float = np.nan):
        super().__init__(message)
        self.last_point = last_point
        self.last_value = last_value


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    error: float
    history: list[float] = field(default_factory=list)


def squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """N x K squared Euclidean distances, clipped at zero."""
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _assignment_error(x, centers, assign) -> float:
    r = x - centers[assign]
    return float(np.einsum("nd,nd->", r, r))


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with a center
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform(0.0, total), side="right"))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        np.minimum(closest, ((x - centers[j]) ** 2).sum(1), out=closest)
    return centers


def kmeans(data, k: int, max_iters: int = 50, seed: int = 0,
           init: np.ndarray | None = None, n_init: int = 1) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its assigned center.
    ``history`` holds the error after every iteration and is nonincreasing.
    With ``n_init > 1`` the best of that many seedings is returned (the first
    uses ``seed`` itself, so ``n_init=1`` results are unchanged).
    """
    x = as_matrix(data)
    n = x.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")
    if k < 1:
        raise ValueError("k must be positive")
    if n_init < 1:
        raise ValueError("n_init must be positive")
    if init is not None or n_init == 1:
        return _lloyd(x, k, max_iters, np.random.default_rng(seed), init)
    runs = [_lloyd(x, k, max_iters, np.random.default_rng(seed if i == 0 else [seed, i]), None)
            for i in range(n_init)]
    return min(runs, key=lambda r: r.error)


def _lloyd(x, k, max_iters, rng, init) -> KMeansResult:
    n = x.shape[0]
    centers = kmeans_plusplus(x, k, rng) if init is None else np.array(init, dtype=np.float64)

    assign = squared_distances(x, centers).argmin(1)
    history = [_assignment_error(x, centers, assign)]
    for _ in range(max_iters):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        live = counts > 0
        centers[live] = sums[live] / counts[live, None]
        if not live.all():
            resid = ((x - centers[assign]) ** 2).sum(1)
            for j in np.flatnonzero(~live):
                far = int(resid.argmax())
                centers[j] = x[far]
                resid[far] = -1.0
        dist = squared_distances(x, centers)
        new_assign = dist.argmin(1)
        # keep the old label on ties so the error cannot go up through rounding
        old_d = dist[np.arange(n), assign]
        new_d = dist[np.arange(n), new_assign]
        new_assign = np.where(new_d < old_d, new_assign, assign)
        changed = np.any(new_assign != assign)
        assign = new_assign
        history.append(_assignment_error(x, centers, assign))
        if not changed and live.all():
            break
    return KMeansResult(centers, assign, history[-1], history)


@dataclass
class LbfgsConfig:
    memory: int = 10
    max_line_search: int = 5
    armijo_c: float = 1e-4
    max_iters: int = 10
    grad_tol: float = 1e-10

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if not 0.0 < self.armijo_c < 1.0:
            raise ValueError("armijo_c must lie in (0, 1)")


@dataclass
class LbfgsResult:
    point: np.ndarray
    value: float
    iterations: int
    evaluations: int
    converged: bool


def _two_loop(grad, s_hist, y_hist, rho_hist, h0_diag=None):
    q = grad.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if h0_diag is None:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    else:
        q *= h0_diag
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _backtrack_factor(f0: float, f_trial: float, slope: float, step: float) -> float:
    """Step shrink factor from the quadratic model through f0, slope and f_trial,
    clipped to [0.1, 0.5] (0.5 is plain halving)."""
    curv = f_trial - f0 - slope * step
    if curv <= 0.0:
        return 0.5
    return float(np.clip(-slope * step / (2.0 * curv), 0.1, 0.5))


def lbfgs_minimize(objective_and_gradient: Callable[[np.ndarray], tuple[float, np.ndarray]],
                   start, config: LbfgsConfig | None = None,
                   h0_diag: np.ndarray | None = None) -> LbfgsResult:
    """Minimize with L-BFGS and a backtracking Armijo line search.

    Every accepted step satisfies the Armijo condition, so the returned value never
    exceeds the value at ``start``. Stops when the gradient max-norm drops below
    ``grad_tol``, after ``max_iters`` iterations, or when the line search fails.
    A non-finite trial during line search is treated as insufficient decrease; an
    :class:`OptimizationError` is raised only if no finite point can be produced.

    ``h0_diag`` is an optional positive diagonal initial inverse-Hessian (a
    preconditioner); without it the usual s'y / y'y scaling is used.
    """
    cfg = config or LbfgsConfig()
    x = np.array(start, dtype=np.float64).ravel()
    if h0_diag is not None:
        h0_diag = np.asarray(h0_diag, dtype=np.float64).ravel()
        if h0_diag.shape != x.shape or not np.all(h0_diag > 0):
            raise ValueError("h0_diag must be positive with the shape of start")
    f, g = objective_and_gradient(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64).ravel()
    evals = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationError("non-finite objective at the starting point", x.copy(), f)

    s_hist: deque = deque(maxlen=cfg.memory)
    y_hist: deque = deque(maxlen=cfg.memory)
    rho_hist: deque = deque(maxlen=cfg.memory)
    it = 0
    converged = False
    while it < cfg.max_iters:
        gmax = float(np.abs(g).max()) if g.size else 0.0
        if gmax <= cfg.grad_tol:
            converged = True
            break
        if s_hist:
            direction = _two_loop(g, s_hist, y_hist, rho_hist, h0_diag)
            slope = float(g @ direction)
            if not slope < 0.0:
                s_hist.clear(), y_hist.clear(), rho_hist.clear()
        if not s_hist and h0_diag is not None:
            direction = -h0_diag * g
            slope = float(g @ direction)
            step = 1.0
        elif not s_hist:
            direction = -g
            slope = float(g @ direction)
            step = 1.0 / max(float(np.linalg.norm(g)), 1e-300)
        else:
            step = 1.0

        accepted = False
        saw_finite = False
        for _ in range(cfg.max_line_search):
            x_new = x + step * direction
            f_new, g_new = objective_and_gradient(x_new)
            evals += 1
            f_new = float(f_new)
            g_new = np.asarray(g_new, dtype=np.float64).ravel()
            finite = np.isfinite(f_new) and np.all(np.isfinite(g_new))
            saw_finite |= bool(finite)
            if finite and f_new <= f + cfg.armijo_c * step * slope:
                accepted = True
                break
            step *= _backtrack_factor(f, f_new, slope, step) if finite else 0.1
        if not accepted:
            if not saw_finite:
                raise OptimizationError("non-finite objective along the search direction", x.copy(), f)
            break

        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)) and sy > 0.0:
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
        x, f, g = x_new, f_new, g_new
        it += 1
    else:
        converged = bool(g.size == 0 or np.abs(g).max() <= cfg.grad_tol)
    return LbfgsResult(x, f, it, evals, converged)
