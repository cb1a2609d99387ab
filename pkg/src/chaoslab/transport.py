"""Wasserstein distances between equal-weight empirical measures."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .errors import ConvergenceWarning, ValidationError

__all__ = [
    "EmpiricalMeasure",
    "PathCloud",
    "cost_matrix",
    "wasserstein_1d",
    "wasserstein_assignment",
    "wasserstein_entropic",
    "path_wasserstein_supnorm",
    "ENTROPIC_MIN_SIZE",
]

# below this support size the exact solver is always preferred
ENTROPIC_MIN_SIZE = 4096


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform measure on the rows of ``points``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValidationError("an empirical measure needs at least one point")
        if not np.isfinite(pts).all():
            raise ValidationError("empirical measure coordinates must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def m(self) -> int:
        return self.points.shape[1]

    def moment(self, p: float) -> float:
        """M_p = integral of |x|^p."""
        return float(np.mean(np.linalg.norm(self.points, axis=1) ** p))

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class PathCloud:
    """``n`` trajectories of shape ``(N+1, m)`` on a shared grid."""

    paths: np.ndarray
    grid: object = None

    def __post_init__(self):
        arr = np.asarray(self.paths, dtype=float)
        if arr.ndim == 2:
            arr = arr[..., None]
        if arr.ndim != 3:
            raise ValidationError("path cloud must have shape (n, N+1, m)")
        object.__setattr__(self, "paths", arr)

    @property
    def n(self) -> int:
        return self.paths.shape[0]


def _as_points(x) -> np.ndarray:
    if isinstance(x, EmpiricalMeasure):
        return x.points
    return EmpiricalMeasure(x).points


def _check_p(p):
    if not p >= 1:
        raise ValidationError(f"Wasserstein order p must be >= 1, got {p}")


def cost_matrix(a: np.ndarray, b: np.ndarray, p: float) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return dist ** p


def wasserstein_1d(p: float, xs, ys) -> float:
    _check_p(p)
    x = np.asarray(xs, dtype=float).ravel()
    y = np.asarray(ys, dtype=float).ravel()
    if x.size != y.size:
        raise ValidationError(f"sample sizes differ ({x.size} vs {y.size})")
    if x.size == 0:
        raise ValidationError("empty samples")
    gaps = np.abs(np.sort(x) - np.sort(y))
    return float(np.mean(gaps ** p) ** (1.0 / p))


def _pair(A, B):
    a, b = _as_points(A), _as_points(B)
    if a.shape[0] != b.shape[0]:
        raise ValidationError(f"support sizes differ ({a.shape[0]} vs {b.shape[0]})")
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimensions differ ({a.shape[1]} vs {b.shape[1]})")
    return a, b


def _assignment_cost(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    # sorted by row, so the summation order is fixed
    return float(np.sum(cost[rows, cols]))


def wasserstein_assignment(p: float, A, B) -> float:
    """Exact W_p via optimal assignment (shortest augmenting paths)."""
    _check_p(p)
    a, b = _pair(A, B)
    n = a.shape[0]
    if a.shape[1] == 1:
        return wasserstein_1d(p, a[:, 0], b[:, 0])
    return (_assignment_cost(cost_matrix(a, b, p)) / n) ** (1.0 / p)


def wasserstein_entropic(p: float, A, B, reg: float, max_iters: int = 2000, tol: float = 1e-9):
    """Log-domain Sinkhorn estimate of W_p.

    Returns ``(estimate, converged)`` where the estimate is the transport
    cost of the regularised plan (no entropy term), raised to ``1/p``.
    ``reg`` is relative to the largest entry of the cost matrix.
    """
    _check_p(p)
    if not reg > 0:
        raise ValidationError("reg must be positive")
    a, b = _pair(A, B)
    n = a.shape[0]
    cost = cost_matrix(a, b, p)
    scale = cost.max()
    if scale == 0:
        return 0.0, True
    target = reg * scale
    log_w = -np.log(n)
    f = np.zeros(n)
    g = np.zeros(n)
    # epsilon scaling: anneal from the cost scale down to the target,
    # warm-starting the potentials; only the final stage must meet ``tol``
    eps = max(target, scale)
    converged = False
    while True:
        final = eps <= target
        k_mat = -cost / eps
        budget = max_iters if final else 200
        stage_tol = tol if final else 1e-3
        done = False
        for _ in range(budget):
            f = -logsumexp(k_mat + g[None, :], axis=1) + log_w
            g_new = -logsumexp(k_mat + f[:, None], axis=0) + log_w
            plan_rows = np.exp(logsumexp(k_mat + f[:, None] + g_new[None, :], axis=1))
            g = g_new
            if np.max(np.abs(plan_rows - 1.0 / n)) * n < stage_tol:
                done = True
                break
        if final:
            converged = done
            break
        eps = max(target, eps / 4)
    plan = np.exp(k_mat + f[:, None] + g[None, :])
    est = float(np.sum(plan * cost)) / float(np.sum(plan))
    if not converged:
        warnings.warn(f"Sinkhorn did not reach tol {tol:g} in {max_iters} iterations", ConvergenceWarning, stacklevel=2)
    return est ** (1.0 / p), converged


def path_wasserstein_supnorm(p: float, A, B) -> float:
    """W_p on path space with the discrete-grid sup-norm as ground metric."""
    _check_p(p)
    a = A if isinstance(A, PathCloud) else PathCloud(A)
    b = B if isinstance(B, PathCloud) else PathCloud(B)
    if a.paths.shape[1:] != b.paths.shape[1:]:
        raise ValidationError("path clouds must share the grid and state dimension")
    if a.grid is not None and b.grid is not None and a.grid != b.grid:
        raise ValidationError("path clouds live on different grids")
    if a.n != b.n:
        raise ValidationError(f"cloud sizes differ ({a.n} vs {b.n})")
    n = a.n
    sup = np.zeros((n, n))
    for k in range(a.paths.shape[1]):
        diff = a.paths[:, None, k, :] - b.paths[None, :, k, :]
        np.maximum(sup, np.sqrt(np.sum(diff * diff, axis=-1)), out=sup)
    return (_assignment_cost(sup ** p) / n) ** (1.0 / p)
