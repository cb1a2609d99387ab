"""Backward regression Monte Carlo for Lipschitz BSDEs.

Arrays are time-major: states ``(N+1, S, n, dx)``, increments ``(N, S, n, d)``
and values ``(N+1, S, n, m)``.  ``S`` counts independent groups (particle
systems) of ``n`` members each; interaction statistics are taken within a
group, conditional expectations are pooled over all ``S * n`` samples.

Two explicit schemes are available.  ``"euler"`` is

    y_k = E[y_{k+1} | x_k] + dt * F(t_k, x_k, yhat, zhat, law_k)

and ``"heun"`` adds a trapezoidal corrector built from a regressed
``F(t_{k+1}, ...)`` term; both need one least-squares solve per step and no
nonlinear iterations.  The default is ``"heun"`` (second order in dt).
"""
from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConvergenceWarning, ValidationError
from .kernel import BrownianBundle, TimeGrid

__all__ = [
    "DriverSpec",
    "TerminalSpec",
    "BasisSpec",
    "PathView",
    "BsdeSolution",
    "PicardResult",
    "solve_backward",
    "picard_iterate",
    "write_diagnostics_csv",
]

SCHEMES = ("euler", "heun")


@dataclass(frozen=True)
class DriverSpec:
    """Generator ``F(t, x, y, z, mu)`` with declared Lipschitz data.

    ``evaluate`` receives ``x (S, n, dx)``, ``y (S, n, m)``, ``z (S, n, m, d)``
    and ``mu``, an array ``(S or 1, K, m)`` holding the point cloud of the law
    argument for each group.  It returns ``(S, n, m)``.
    """

    evaluate: Callable
    lipschitz_y: float = 1.0
    lipschitz_z: float = 1.0
    lipschitz_mu: float = 1.0
    growth_bound: float = 1.0
    depends_on_z: bool = False
    depends_on_law: bool = False
    name: str = "custom"

    def __post_init__(self):
        for label in ("lipschitz_y", "lipschitz_z", "lipschitz_mu", "growth_bound"):
            v = getattr(self, label)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{label} must be finite and nonnegative, got {v}")

    @property
    def lipschitz(self) -> float:
        """Single constant L_F dominating all declared ones."""
        return max(self.lipschitz_y, self.lipschitz_z, self.lipschitz_mu)


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal value ``G(path, law_T)``.

    ``evaluate`` receives the state paths ``(N+1, S, n, dx)`` and the terminal
    state cloud ``(S or 1, K, dx)`` of the law argument; returns ``(S, n, m)``.
    """

    evaluate: Callable
    moment_order: float = 2.0
    lipschitz_const: Optional[float] = None
    depends_on_law: bool = False
    name: str = "custom"

    def __post_init__(self):
        if not self.moment_order >= 2:
            raise ValidationError("terminal moment_order k must be >= 2")


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial regression basis.

    Own-state monomials up to total ``degree``; when ``shared_degree > 0`` and
    groups have more than one member, powers of the group mean of the state
    are appended.
    """

    degree: int = 1
    shared_degree: int = 0
    ridge: float = 1e-8
    cond_threshold: float = 1e10

    def __post_init__(self):
        if self.degree < 0 or self.shared_degree < 0:
            raise ValidationError("basis degrees must be nonnegative")
        if not self.ridge > 0:
            raise ValidationError("ridge must be positive")

    def features(self, x: np.ndarray) -> np.ndarray:
        S, n, dx = x.shape
        cols = []
        for deg in range(1, self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(dx), deg):
                cols.append(np.prod(x[..., list(combo)], axis=-1))
        if self.shared_degree and n > 1:
            xbar = np.broadcast_to(x.mean(axis=1, keepdims=True), x.shape)
            for deg in range(1, self.shared_degree + 1):
                for combo in itertools.combinations_with_replacement(range(dx), deg):
                    cols.append(np.prod(xbar[..., list(combo)], axis=-1))
        if not cols:
            return np.empty((S * n, 0))
        return np.stack(cols, axis=-1).reshape(S * n, len(cols))


@dataclass(frozen=True)
class PathView:
    """States and driving increments for a backward solve."""

    grid: TimeGrid
    states: np.ndarray  # (N+1, S, n, dx)
    dW: np.ndarray  # (N, S, n, d)

    @property
    def groups(self) -> int:
        return self.states.shape[1]

    @property
    def size(self) -> int:
        return self.states.shape[2]

    @classmethod
    def from_bundle(cls, bundle: BrownianBundle, groups: int = 1) -> "PathView":
        if bundle.n % groups:
            raise ValidationError("bundle size must be a multiple of the group count")
        n = bundle.n // groups
        inc = bundle.increments.reshape(groups, n, bundle.grid.N, bundle.d)
        dW = np.ascontiguousarray(inc.transpose(2, 0, 1, 3))
        states = np.zeros((bundle.grid.N + 1, groups, n, bundle.d))
        np.cumsum(dW, axis=0, out=states[1:])
        return cls(bundle.grid, states, dW)


def _pairwise_sum_products(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # sum_i a[i, p] * b[i, q] with numpy's pairwise reduction (no BLAS threads,
    # so the result does not depend on the thread count)
    prod = a.T[:, None, :] * b.T[None, :, :]
    return prod.sum(axis=-1)


@dataclass(frozen=True)
class _Fit:
    """Coefficients of a standardised least-squares projection."""

    keep: np.ndarray  # indices of non-degenerate features
    loc: np.ndarray
    scale: np.ndarray
    target_mean: np.ndarray
    beta: np.ndarray  # (len(keep), targets)
    constant: np.ndarray  # bool per target: exactly constant column

    def predict(self, phi: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(self.target_mean, (phi.shape[0], self.target_mean.size)).copy()
        if self.keep.size:
            u = (phi[:, self.keep] - self.loc) / self.scale
            varying = ~self.constant
            if varying.any():
                out[:, varying] += u @ self.beta[:, varying]
        return out


class _Projector:
    """Normal-equation least squares on standardised features.

    Degenerate (zero-variance) features are dropped; the Gram matrix is ridged
    only when its condition number exceeds the threshold.
    """

    def __init__(self, phi: np.ndarray, basis: BasisSpec):
        self.phi = phi
        M = phi.shape[0]
        self.M = M
        if phi.shape[1]:
            loc = phi.sum(axis=0) / M
            centred = phi - loc
            scale = np.sqrt(_pairwise_sum_products(centred, centred).diagonal() / M)
            spread = np.abs(phi).max(axis=0)
            keep = np.flatnonzero(scale > 1e-12 * np.maximum(spread, 1e-300))
        else:
            keep = np.empty(0, dtype=int)
        self.keep = keep
        self.condition = 1.0
        self.ridged = False
        if keep.size:
            self.loc = loc[keep]
            self.scale = scale[keep]
            self.u = centred[:, keep] / self.scale
            gram = _pairwise_sum_products(self.u, self.u) / M
            self.condition = float(np.linalg.cond(gram))
            if not math.isfinite(self.condition) or self.condition > basis.cond_threshold:
                gram = gram + basis.ridge * np.eye(keep.size)
                self.ridged = True
            self.factor = cho_factor(gram)
        else:
            self.loc = np.empty(0)
            self.scale = np.empty(0)
            self.u = np.empty((M, 0))

    def fit(self, targets: np.ndarray) -> tuple[_Fit, np.ndarray]:
        """Project ``targets (M, q)``; returns the fit and fitted values."""
        first = targets[0]
        constant = np.all(targets == first, axis=0)
        mean = targets.sum(axis=0) / self.M
        mean = np.where(constant, first, mean)
        fitted = np.broadcast_to(mean, targets.shape).copy()
        beta = np.zeros((self.keep.size, targets.shape[1]))
        varying = ~constant
        if self.keep.size and varying.any():
            rhs = _pairwise_sum_products(self.u, targets[:, varying] - mean[varying]) / self.M
            beta[:, varying] = cho_solve(self.factor, rhs)
            fitted[:, varying] += self.u @ beta[:, varying]
        return _Fit(self.keep, self.loc, self.scale, mean, beta, constant), fitted


@dataclass(frozen=True)
class StepDiagnostic:
    node: int
    residual: float
    condition: float
    ridged: bool
    z_second_moment: float


@dataclass
class BsdeSolution:
    """Scenario cloud of a backward solve.

    ``y`` is ``(N+1, M, m)`` and ``z`` is ``(N, M, m, d)`` with ``M = S * n``
    flattened group-major.
    """

    grid: TimeGrid
    y: np.ndarray
    z: np.ndarray
    diagnostics: list
    groups: int
    scheme: str
    driver: DriverSpec = field(repr=False)
    terminal: TerminalSpec = field(repr=False)
    basis: BasisSpec = field(repr=False)
    fits: list = field(repr=False, default_factory=list)
    law_flow: Optional[list] = field(repr=False, default=None)
    terminal_law: Optional[np.ndarray] = field(repr=False, default=None)

    @property
    def warnings(self) -> list:
        return [d for d in self.diagnostics if d.ridged]

    def grouped(self, which: str = "y") -> np.ndarray:
        arr = getattr(self, which)
        M = arr.shape[1]
        return arr.reshape(arr.shape[0], self.groups, M // self.groups, *arr.shape[2:])

    def evaluate(self, view: "PathView"):
        """Regression read-out of ``(y, z)`` along new paths.

        Requires a frozen law flow (single BSDE or McKean-Vlasov solve).  The
        terminal node is the exact terminal value of the new paths.
        """
        if self.law_flow is None and self.driver.depends_on_law:
            raise ValidationError("read-out needs a frozen law flow")
        return _readout(self, view)

    def value_at(self, node: int, x: np.ndarray) -> np.ndarray:
        """One-step read-out of ``y`` at ``node < N`` for states ``x (S, n, dx)``."""
        N = self.grid.N
        if not 0 <= node < N:
            raise ValidationError(f"node must lie in [0, {N})")
        if self.law_flow is None and self.driver.depends_on_law:
            raise ValidationError("read-out needs a frozen law flow")
        x = np.asarray(x, dtype=float)
        S, n = x.shape[:2]
        fit_y, fit_z, fit_f = self.fits[node]
        phi = self.basis.features(x)
        yhat = fit_y.predict(phi).reshape(S, n, -1)
        m = yhat.shape[-1]
        zhat = fit_z.predict(phi).reshape(S, n, m, -1)
        law = self.law_flow[node] if self.law_flow is not None else np.zeros((1, 1, m))
        t = self.grid.nodes[node]
        dt = self.grid.dt
        if self.scheme == "euler":
            return yhat + dt * self.driver.evaluate(t, x, yhat, zhat, law)
        fhat = fit_f.predict(phi).reshape(S, n, m)
        f_here = self.driver.evaluate(t, x, yhat + dt * fhat, zhat, law)
        return yhat + 0.5 * dt * (fhat + f_here)


def _law_array(flow_k) -> np.ndarray:
    pts = getattr(flow_k, "points", flow_k)
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts[None]


def _check_view(view, driver, terminal):
    if isinstance(view, BrownianBundle):
        view = PathView.from_bundle(view)
    if not isinstance(view, PathView):
        raise ValidationError("paths must be a BrownianBundle or PathView")
    return view


def _solve(driver, terminal, view: PathView, basis: BasisSpec, law, scheme: str,
           terminal_law=None, z_control: bool = True):
    """Core backward recursion.

    ``law`` is ``"system"`` (interaction with the current group slice) or a
    list of per-node law clouds ``(1, K, m)`` (frozen law), or ``None``.
    """
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    grid = view.grid
    N, S, n = grid.N, view.groups, view.size
    d = view.dW.shape[-1]
    dt = grid.dt
    nodes = grid.nodes
    states = view.states

    if terminal_law is None:
        terminal_law = states[N]
    y_T = np.asarray(terminal.evaluate(states, terminal_law), dtype=float)
    if y_T.ndim == 2:
        y_T = y_T[..., None]
    m = y_T.shape[-1]
    y = np.empty((N + 1, S, n, m))
    z = np.empty((N, S, n, m, d))
    y[N] = y_T

    def law_at(k, slab):
        if law == "system":
            return slab
        if law is None:
            return np.zeros((1, 1, m))
        return law[k]

    fits = []
    diags = []
    for k in range(N - 1, -1, -1):
        proj = _Projector(basis.features(states[k]), basis)
        dWk = view.dW[k]
        y_next = y[k + 1]
        fit_y, fitted_y = proj.fit(y_next.reshape(S * n, m))
        yhat = fitted_y.reshape(S, n, m)
        # E[y_{k+1} dW | x_k] = E[(y_{k+1} - yhat) dW | x_k]; the centred
        # product has O(1) instead of O(1/dt) variance
        centred = y_next - yhat if z_control else y_next
        fit_z, fitted_z = proj.fit((centred[..., :, None] * dWk[..., None, :]).reshape(S * n, m * d) / dt)
        zhat = fitted_z.reshape(S, n, m, d)
        fitted = fitted_y
        z[k] = zhat
        x_k = states[k]
        fit_f = None
        if scheme == "euler":
            y[k] = yhat + dt * driver.evaluate(nodes[k], x_k, yhat, zhat, law_at(k, yhat))
        else:
            z_next = z[k + 1] if k + 1 < N else zhat
            f_next = driver.evaluate(nodes[k + 1], states[k + 1], y_next, z_next, law_at(k + 1, y_next))
            fit_f, fhat = proj.fit(np.asarray(f_next, dtype=float).reshape(S * n, m))
            fhat = fhat.reshape(S, n, m)
            y_pred = yhat + dt * fhat
            f_here = driver.evaluate(nodes[k], x_k, y_pred, zhat, law_at(k, y_pred))
            y[k] = yhat + 0.5 * dt * (fhat + f_here)
        resid = y_next.reshape(S * n, m) - fitted
        diags.append(StepDiagnostic(
            node=k,
            residual=float(np.sqrt((resid ** 2).sum() / (S * n))),
            condition=proj.condition,
            ridged=proj.ridged,
            z_second_moment=float((zhat ** 2).sum() / (S * n)),
        ))
        fits.append((fit_y, fit_z, fit_f))
    fits.reverse()
    diags.reverse()
    if not (np.isfinite(y).all() and np.isfinite(z).all()):
        raise FloatingPointError("non-finite values in backward solve")
    return y, z, fits, diags, terminal_law


def _readout(sol: BsdeSolution, view: PathView):
    grid = sol.grid
    if view.grid != grid:
        raise ValidationError("read-out paths must share the solution grid")
    N, S, n = grid.N, view.groups, view.size
    states = view.states
    d = view.dW.shape[-1]
    dt = grid.dt
    y_T = np.asarray(sol.terminal.evaluate(states, sol.terminal_law), dtype=float)
    if y_T.ndim == 2:
        y_T = y_T[..., None]
    m = y_T.shape[-1]
    y = np.empty((N + 1, S, n, m))
    z = np.empty((N, S, n, m, d))
    y[N] = y_T
    flow = sol.law_flow
    for k in range(N - 1, -1, -1):
        fit_y, fit_z, fit_f = sol.fits[k]
        phi = sol.basis.features(states[k])
        yhat = fit_y.predict(phi).reshape(S, n, m)
        zhat = fit_z.predict(phi).reshape(S, n, m, d)
        z[k] = zhat
        law_k = flow[k] if flow is not None else np.zeros((1, 1, m))
        if sol.scheme == "euler":
            y[k] = yhat + dt * sol.driver.evaluate(grid.nodes[k], states[k], yhat, zhat, law_k)
        else:
            fhat = fit_f.predict(phi).reshape(S, n, m)
            y_pred = yhat + dt * fhat
            f_here = sol.driver.evaluate(grid.nodes[k], states[k], y_pred, zhat, law_k)
            y[k] = yhat + 0.5 * dt * (fhat + f_here)
    return y, z


def _package(y, z, fits, diags, terminal_law, view, driver, terminal, basis, scheme, flow):
    N1, S, n, m = y.shape
    return BsdeSolution(
        grid=view.grid,
        y=y.reshape(N1, S * n, m),
        z=z.reshape(N1 - 1, S * n, m, z.shape[-1]),
        diagnostics=diags,
        groups=S,
        scheme=scheme,
        driver=driver,
        terminal=terminal,
        basis=basis,
        fits=fits,
        law_flow=flow,
        terminal_law=terminal_law,
    )


def solve_backward(
    driver: DriverSpec,
    terminal: TerminalSpec,
    paths,
    basis: BasisSpec,
    law_flow: Optional[Sequence] = None,
    *,
    scheme: str = "heun",
) -> BsdeSolution:
    """Solve one BSDE by backward regression with the law argument frozen.

    ``law_flow`` holds one measure (``EmpiricalMeasure`` or ``(K, m)`` array)
    per grid node and is required when the driver depends on the law.
    """
    view = _check_view(paths, driver, terminal)
    flow = None
    if driver.depends_on_law:
        if law_flow is None:
            raise ValidationError("driver depends on the law: law_flow with one measure per node is required")
        if len(law_flow) != view.grid.N + 1:
            raise ValidationError(
                f"law_flow must have {view.grid.N + 1} measures (one per node), got {len(law_flow)}")
        flow = [_law_array(mu) for mu in law_flow]
    y, z, fits, diags, tl = _solve(driver, terminal, view, basis, flow, scheme)
    return _package(y, z, fits, diags, tl, view, driver, terminal, basis, scheme, flow)


def _flow_distance(a: np.ndarray, b: np.ndarray) -> float:
    """W_2 between two equal-size clouds (exact in 1D, coupling bound otherwise)."""
    a = a.reshape(a.shape[-2], -1)
    b = b.reshape(b.shape[-2], -1)
    if a.shape[1] == 1:
        diff = np.sort(a[:, 0]) - np.sort(b[:, 0])
        return float(np.sqrt(np.mean(diff ** 2)))
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


@dataclass
class PicardResult:
    solution: BsdeSolution
    law_flow: list
    log: list  # sup-over-nodes W_2 distance per pass
    converged: bool
    iterations: int

    def __iter__(self):
        return iter((self.solution, self.law_flow, self.log))


def picard_iterate(
    driver: DriverSpec,
    terminal: TerminalSpec,
    paths,
    basis: BasisSpec,
    initial_law_flow: Optional[Sequence] = None,
    max_iters: int = 50,
    tol: float = 1e-4,
    *,
    scheme: str = "heun",
) -> PicardResult:
    """Fixed point on the law flow.

    Each pass solves with the current flow frozen and replaces it by the
    node-wise clouds of ``y``.  ``iterations`` counts the law updates needed
    before a pass left the flow unchanged within ``tol`` (the confirming pass
    is not counted), so a law-independent driver reports one iteration.
    """
    if not driver.depends_on_law:
        raise ValidationError("picard_iterate requires a law-dependent driver")
    if not tol > 0:
        raise ValidationError("tol must be positive")
    view = _check_view(paths, driver, terminal)
    N = view.grid.N
    if initial_law_flow is None:
        terminal_law = view.states[N]
        g = np.asarray(terminal.evaluate(view.states, terminal_law), dtype=float)
        g = g.reshape(1, -1, g.shape[-1] if g.ndim == 3 else 1)
        flow = [g] * (N + 1)
    else:
        if len(initial_law_flow) != N + 1:
            raise ValidationError("initial_law_flow needs one measure per node")
        flow = [_law_array(mu) for mu in initial_law_flow]

    log = []
    converged = False
    all_diags = []
    for it in range(1, max_iters + 1):
        y, z, fits, diags, tl = _solve(driver, terminal, view, basis, flow, scheme)
        all_diags.extend((it, dg) for dg in diags)
        new_flow = [y[k].reshape(1, -1, y.shape[-1]) for k in range(N + 1)]
        dist = max(_flow_distance(flow[k], new_flow[k]) for k in range(N + 1))
        log.append(dist)
        solution = _package(y, z, fits, diags, tl, view, driver, terminal, basis, scheme, flow)
        solution.picard_diagnostics = all_diags
        flow = new_flow
        if dist < tol:
            converged = True
            break
    iterations = len(log) - 1 if converged else len(log)
    if not converged:
        warnings.warn(f"Picard iteration stopped after {max_iters} passes at distance {log[-1]:.3g} >= tol {tol:g}",
                      ConvergenceWarning, stacklevel=2)
    return PicardResult(solution, flow, log, converged, iterations)


def write_diagnostics_csv(path, solution: BsdeSolution) -> None:
    """CSV with columns ``iteration,node,residual,condition``."""
    rows = getattr(solution, "picard_diagnostics", None)
    if rows is None:
        rows = [(0, dg) for dg in solution.diagnostics]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "node", "residual", "condition"])
        for it, dg in rows:
            w.writerow([it, dg.node, repr(dg.residual), repr(dg.condition)])
