"""Particle approximation of a semilinear PDE on the Wasserstein space.

Both sides are solved through their probabilistic representations: the
n-particle FBSDE gives ``v^{i,n}(0, x)`` and the McKean-Vlasov FBSDE gives
``V(0, x, mu)``; they are compared at i.i.d. initial points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .chaos import rate_curve
from .errors import ValidationError
from .kernel import (
    STREAM_CLOUD,
    STREAM_INITIAL,
    STREAM_SYSTEM,
    BrownianBundle,
    TimeGrid,
    sample_brownian,
    uniforms,
)
from .meanfield import PicardParams, SchemeParams
from .regression import (
    BasisSpec,
    BsdeSolution,
    DriverSpec,
    PathView,
    TerminalSpec,
    _package,
    _solve,
    picard_iterate,
    solve_backward,
)

__all__ = [
    "PdeScenario",
    "PdeComparison",
    "ParticleFbsde",
    "MasterSolution",
    "epsilon_cd",
    "pde_preset",
    "PDE_PRESETS",
    "initial_draws",
    "euler_maruyama",
    "solve_particle_fbsde",
    "solve_master_fbsde",
    "compare_pde",
]

# replication id reserved for the master cloud
MASTER_REPLICATION = 2**32 - 1


def epsilon_cd(n, d: int):
    """Dimension-dependent rate: n^{-1/2}, n^{-1/2} log n (d = 4) or n^{-2/d}."""
    if d < 1:
        raise ValidationError("d must be >= 1")
    n = np.asarray(n, dtype=float)
    if np.any(n < 1):
        raise ValidationError("n must be >= 1")
    if d < 4:
        out = n ** -0.5
    elif d == 4:
        out = n ** -0.5 * np.log(n)
    else:
        out = n ** (-2.0 / d)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PdeScenario:
    """Coefficients ``B(x, mu)``, ``sigma(x, mu)``, ``F`` and ``G`` plus the initial law.

    ``drift(x, law_x)`` returns ``(S, n, d)`` and ``vol(x, law_x)`` returns
    ``(S, n, d, d)``; ``law_x`` is the ``(S, K, d)`` state cloud.  The initial
    law is Gaussian with the given mean and standard deviation per coordinate.
    """

    drift: Callable
    vol: Callable
    driver: DriverSpec
    terminal: TerminalSpec
    d: int = 1
    m: int = 1
    T: float = 1.0
    initial_mean: float = 0.0
    initial_std: float = 1.0
    moment_order: float = 8.0
    preset: str = "custom"
    closed_form: Optional[Callable] = None  # V(t, x, mean_mu)
    measure_free: bool = False

    def __post_init__(self):
        if self.moment_order <= 4:
            raise ValidationError("initial law must have a finite moment of order k > 4")
        if self.initial_std < 0:
            raise ValidationError("initial_std must be nonnegative")

    def singleton(self, x0: float) -> "PdeScenario":
        """Same coefficients with the initial law a point mass at ``x0``."""
        return replace(self, initial_mean=float(x0), initial_std=0.0)


def initial_draws(scenario: PdeScenario, seed: int, replication_id: int, particles) -> np.ndarray:
    """Initial states for the given particle indices, shape ``(len(particles), d)``."""
    u = uniforms(seed, replication_id, np.asarray(particles), np.zeros(1, dtype=np.int64),
                 STREAM_INITIAL, width=scenario.d)[:, 0, :]
    return scenario.initial_mean + scenario.initial_std * ndtri(u)


def euler_maruyama(scenario: PdeScenario, x0: np.ndarray, dW: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Forward interacting SDE; each group of ``x0 (S, n, d)`` interacts through its own cloud."""
    N = grid.N
    X = np.empty((N + 1,) + x0.shape)
    X[0] = x0
    dt = grid.dt
    for k in range(N):
        xk = X[k]
        vol = scenario.vol(xk, xk)
        X[k + 1] = xk + dt * scenario.drift(xk, xk) + np.einsum("snij,snj->sni", vol, dW[k])
    return X


@dataclass
class ParticleFbsde:
    X: np.ndarray  # (N+1, n, d) for the reported system
    Y: np.ndarray  # (N+1, n, m)
    v0: np.ndarray  # (n, m) = v^{i,n}(0, xi)
    xi: np.ndarray
    batch: BsdeSolution = field(repr=False, default=None)


@dataclass
class MasterSolution:
    """McKean-Vlasov side; ``V(x)`` reads the value at node 0 under the initial law."""

    scenario: PdeScenario
    solution: BsdeSolution
    X: np.ndarray = field(repr=False)
    converged: bool = True
    iterations: int = 0

    def V(self, x, node: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.scenario.d == 1 else x[None, :]
        return self.solution.value_at(node, x[None]).reshape(x.shape[0], -1)


def _bundle_view(scenario, bundle: BrownianBundle, xi_all: np.ndarray, groups: int) -> PathView:
    base = PathView.from_bundle(bundle, groups=groups)
    x0 = xi_all.reshape(groups, bundle.n // groups, scenario.d)
    X = euler_maruyama(scenario, x0, base.dW, bundle.grid)
    return PathView(bundle.grid, X, base.dW)


def solve_particle_fbsde(scenario: PdeScenario, n: int, bundle: BrownianBundle, basis: BasisSpec,
                         scheme_params: SchemeParams = SchemeParams(), xi: Optional[np.ndarray] = None) -> ParticleFbsde:
    """n-particle FBSDE; extra independent systems from the same stream only feed the regressions."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if bundle.n != n:
        raise ValidationError("bundle size must equal n")
    if bundle.d != scenario.d:
        raise ValidationError("bundle dimension must equal the scenario dimension d")
    grid = bundle.grid
    S = scheme_params.systems_for(n)
    if xi is None:
        xi = initial_draws(scenario, bundle.seed, bundle.replication_id, bundle.particles)
    xi = np.asarray(xi, dtype=float).reshape(n, scenario.d)
    if S > 1:
        aux_ids = int(bundle.particles.max()) + 1 + np.arange(n * (S - 1))
        aux = sample_brownian(bundle.seed, bundle.replication_id, n * (S - 1), bundle.d, grid,
                              stream=bundle.stream, particles=aux_ids)
        inc = np.concatenate([bundle.increments, aux.increments])
        xi_all = np.concatenate([xi, initial_draws(scenario, bundle.seed, bundle.replication_id, aux_ids)])
    else:
        inc, xi_all = bundle.increments, xi
    full = BrownianBundle(grid, n * S, bundle.d, inc, bundle.seed, bundle.replication_id, bundle.stream,
                          np.arange(n * S))
    view = _bundle_view(scenario, full, xi_all, S)
    b = basis if basis.shared_degree else replace(basis, shared_degree=1)
    law = "system" if scenario.driver.depends_on_law else None
    y, z, fits, diags, tl = _solve(scenario.driver, scenario.terminal, view, b, law, scheme_params.scheme)
    batch = _package(y, z, fits, diags, tl, view, scenario.driver, scenario.terminal, b, scheme_params.scheme, None)
    return ParticleFbsde(view.states[:, 0], y[:, 0], y[0, 0], xi, batch)


def solve_master_fbsde(scenario: PdeScenario, cloud_size: int, bundle: BrownianBundle, basis: BasisSpec,
                       picard_params: PicardParams = PicardParams(), xi: Optional[np.ndarray] = None) -> MasterSolution:
    """McKean-Vlasov FBSDE from a cloud with initial law ``mu`` (or the given ``xi`` cloud)."""
    if cloud_size < 2:
        raise ValidationError("cloud_size must be >= 2")
    if bundle.n < cloud_size:
        bundle = sample_brownian(bundle.seed, bundle.replication_id, cloud_size, bundle.d, bundle.grid,
                                 stream=bundle.stream)
    elif bundle.n > cloud_size:
        bundle = bundle.head(cloud_size)
    if xi is None:
        xi = initial_draws(scenario, bundle.seed, bundle.replication_id, np.arange(cloud_size))
    xi = np.asarray(xi, dtype=float).reshape(cloud_size, scenario.d)
    view = _bundle_view(scenario, bundle, xi, 1)
    b = replace(basis, shared_degree=0)
    if scenario.driver.depends_on_law:
        res = picard_iterate(scenario.driver, scenario.terminal, view, b, None,
                             picard_params.max_iters, picard_params.tol, scheme=picard_params.scheme)
        return MasterSolution(scenario, res.solution, view.states, res.converged, res.iterations)
    sol = solve_backward(scenario.driver, scenario.terminal, view, b, scheme=picard_params.scheme)
    return MasterSolution(scenario, sol, view.states)


@dataclass
class PdeComparison:
    n: int
    gap: float
    gap_stderr: float
    empirical_gap: Optional[float]
    empirical_gap_stderr: Optional[float]
    epsilon_n: float
    epsilon_n_plus_r: float
    reps: int

    def __post_init__(self):
        if not (self.gap >= 0 and math.isfinite(self.gap)):
            raise ValidationError("gap must be finite and nonnegative")


def compare_pde(scenario: PdeScenario, ns: Sequence[int], reps: int, cloud_size: int, *, grid: TimeGrid,
                seed: int = 0, basis: BasisSpec = BasisSpec(degree=1, shared_degree=1),
                scheme_params: SchemeParams = SchemeParams(), picard_params: PicardParams = PicardParams(),
                empirical_gap: bool = True, empirical_cloud: int = 2048, workers: int = 1) -> list:
    """Squared gaps between ``v^{1,n}(0, xi)`` and ``V(0, xi_1, mu)`` per ``n``.

    With ``empirical_gap`` the second comparison ``V(0, xi_i, L^n(xi))`` is
    also estimated by re-solving the limit from a cloud resampled from the
    ``n`` initial points.
    """
    if reps < 2:
        raise ValidationError("reps must be >= 2")
    master = solve_master_fbsde(
        scenario, cloud_size,
        sample_brownian(seed, MASTER_REPLICATION, cloud_size, scenario.d, grid, stream=STREAM_CLOUD),
        basis, picard_params,
    )
    out = []
    for n in ns:
        def one(r, n=n):
            bundle = sample_brownian(seed, r, n, scenario.d, grid, stream=STREAM_SYSTEM)
            sys = solve_particle_fbsde(scenario, n, bundle, basis, scheme_params)
            v = sys.v0
            V1 = master.V(sys.xi[:1])
            g1 = float(np.sum((v[0] - V1[0]) ** 2))
            g2 = None
            if empirical_gap:
                u = uniforms(seed, r, np.arange(empirical_cloud), np.zeros(1, dtype=np.int64), STREAM_INITIAL)[:, 0, 0]
                pick = np.minimum((u * n).astype(np.int64), n - 1)
                emp = solve_master_fbsde(
                    scenario, empirical_cloud,
                    sample_brownian(seed, r, empirical_cloud, scenario.d, grid, stream=STREAM_CLOUD),
                    basis, picard_params, xi=sys.xi[pick],
                )
                g2 = float(np.mean(np.sum((v - emp.V(sys.xi)) ** 2, axis=-1)))
            return g1, g2

        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=workers) as pool:
                vals = list(pool.map(one, range(reps)))
        else:
            vals = [one(r) for r in range(reps)]
        g1 = np.asarray([v[0] for v in vals])
        eps = float(epsilon_cd(n, scenario.d))
        r_ref = float(rate_curve(n, scenario.d, scenario.moment_order, 2.0))
        if empirical_gap:
            g2 = np.asarray([v[1] for v in vals])
            eg, egs = float(g2.mean()), float(g2.std(ddof=1) / math.sqrt(reps))
        else:
            eg = egs = None
        out.append(PdeComparison(n, float(g1.mean()), float(g1.std(ddof=1) / math.sqrt(reps)), eg, egs,
                                 eps, eps + r_ref, reps))
    return out


# presets -----------------------------------------------------------------------

def _zero_drift(x, law):
    return np.zeros_like(x)


def _unit_vol(x, law):
    S, n, d = x.shape
    return np.broadcast_to(np.eye(d), (S, n, d, d))


def _affine_terminal(beta, gamma):
    def evaluate(paths, law_T):
        xT = paths[-1]
        return (beta * xT.sum(axis=-1, keepdims=True)
                + gamma * law_T.mean(axis=1, keepdims=True).sum(axis=-1, keepdims=True))
    return TerminalSpec(evaluate, moment_order=8.0, lipschitz_const=abs(beta) + abs(gamma),
                        depends_on_law=gamma != 0, name="affine")


def _null_driver():
    return DriverSpec(lambda t, x, y, z, mu: np.zeros_like(y), 0.0, 0.0, 0.0, 0.0, name="null")


def _affine(beta=1.0, gamma=1.0, T=1.0, **kw):
    return dict(
        drift=_zero_drift, vol=_unit_vol, driver=_null_driver(), terminal=_affine_terminal(beta, gamma),
        closed_form=lambda t, x, mean_mu: beta * np.sum(x, axis=-1) + gamma * np.sum(mean_mu),
        measure_free=gamma == 0, **kw,
    )


def _discounted(beta=1.0, gamma=1.0, a=0.5, T=1.0, **kw):
    drv = DriverSpec(lambda t, x, y, z, mu: a * y, abs(a), 0.0, 0.0, abs(a), name="discounted")
    return dict(
        drift=_zero_drift, vol=_unit_vol, driver=drv, terminal=_affine_terminal(beta, gamma),
        closed_form=lambda t, x, mean_mu: math.exp(a * (T - t)) * (beta * np.sum(x, axis=-1) + gamma * np.sum(mean_mu)),
        measure_free=gamma == 0, **kw,
    )


def _constant(c=1.0, T=1.0, **kw):
    term = TerminalSpec(lambda paths, law_T: np.full(paths.shape[1:3] + (1,), float(c)), moment_order=8.0,
                        name="constant")
    return dict(drift=_zero_drift, vol=_unit_vol, driver=_null_driver(), terminal=term,
                closed_form=lambda t, x, mean_mu: np.full(np.shape(x)[:-1], float(c)), measure_free=True, **kw)


def _mean_reverting(beta=1.0, gamma=1.0, kappa=1.0, T=1.0, **kw):
    # B(x, mu) = kappa (mean(mu) - x): the mean is preserved, deviations decay
    def drift(x, law):
        return kappa * (law.mean(axis=1, keepdims=True) - x)
    def closed(t, x, mean_mu):
        decay = math.exp(-kappa * (T - t))
        mm = np.sum(mean_mu)
        return beta * (mm + (np.sum(x, axis=-1) - mm) * decay) + gamma * mm
    return dict(drift=drift, vol=_unit_vol, driver=_null_driver(), terminal=_affine_terminal(beta, gamma),
                closed_form=closed, measure_free=False, **kw)


PDE_PRESETS = {
    "affine": _affine,
    "discounted": _discounted,
    "constant": _constant,
    "mean-reverting": _mean_reverting,
}


def pde_preset(name: str, d: int = 1, T: float = 1.0, initial_mean: float = 0.0, initial_std: float = 1.0,
               moment_order: float = 8.0, **params) -> PdeScenario:
    try:
        factory = PDE_PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown pde preset {name!r}; registered: {', '.join(sorted(PDE_PRESETS))}") from None
    blocks = factory(T=T, **params)
    return PdeScenario(d=d, m=1, T=T, initial_mean=initial_mean, initial_std=initial_std,
                       moment_order=moment_order, preset=name, **blocks)
