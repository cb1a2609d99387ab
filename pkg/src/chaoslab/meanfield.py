"""Interacting backward particle systems and their mean-field limits.

The n-particle system is solved jointly: at every step the interaction sees
the current slice of its own system, while conditional expectations are
pooled over a batch of independent systems (features: own state plus the
system mean of the states).  The McKean-Vlasov limit is a large i.i.d. cloud
with the law fixed by Picard iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ValidationError
from .kernel import STREAM_DRAWS, BrownianBundle, sample_brownian, uniforms
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
from .transport import EmpiricalMeasure

__all__ = [
    "InteractionSpec",
    "SchemeParams",
    "PicardParams",
    "SystemSolution",
    "MkvSolution",
    "solve_interacting",
    "solve_mkv",
    "solve_linear_interaction",
    "interaction_preset",
    "terminal_preset",
    "INTERACTION_PRESETS",
    "TERMINAL_PRESETS",
]

KINDS = ("general-measure", "linear-f", "none")


@dataclass(frozen=True)
class SchemeParams:
    """Backward-scheme settings for particle systems.

    ``batch`` is the minimum number of pooled regression samples and
    ``min_systems`` the minimum number of independent systems in a batch.
    """

    scheme: str = "heun"
    batch: int = 8192
    min_systems: int = 64

    def systems_for(self, n: int) -> int:
        return max(self.min_systems, math.ceil(self.batch / n))


@dataclass(frozen=True)
class PicardParams:
    tol: float = 1e-4
    max_iters: int = 50
    scheme: str = "heun"


def _chunked_average(inner, t, y, z, mu, chunk=256):
    S, n, m = y.shape
    out = np.empty((S, n, m))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        vals = inner(t, y[:, lo:hi, None, :], mu[:, None, :, :], z[:, lo:hi, None])
        out[:, lo:hi] = np.mean(vals, axis=2)
    return out


@dataclass(frozen=True)
class InteractionSpec:
    """Interaction structure of a particle system.

    ``kind == "general-measure"`` (or ``"none"``) uses ``driver`` directly;
    ``kind == "linear-f"`` combines an outer ``F(t, y, z, a)`` with the
    empirical average ``a = mean_j f(t, y_i, y_j, z_i)`` of an inner kernel.
    ``inner_average(t, y, z, mu)`` may supply that average in closed form.
    """

    kind: str
    terminal: TerminalSpec
    driver: Optional[DriverSpec] = None
    outer: Optional[Callable] = None
    inner: Optional[Callable] = None
    inner_average: Optional[Callable] = None
    lipschitz_F: float = 1.0
    lipschitz_f: float = 1.0
    depends_on_z: bool = False
    mean_flow: Optional[Callable] = None
    name: str = "custom"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"interaction kind must be one of {KINDS}")
        for label in ("lipschitz_F", "lipschitz_f"):
            v = getattr(self, label)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{label} must be finite and nonnegative")
        if self.kind == "linear-f":
            if self.outer is None or (self.inner is None and self.inner_average is None):
                raise ValidationError("linear-f interaction needs an outer driver and an inner kernel")
        elif self.driver is None:
            raise ValidationError(f"{self.kind} interaction needs a measure driver")

    def as_driver(self) -> DriverSpec:
        if self.kind != "linear-f":
            return self.driver
        outer, inner, fast = self.outer, self.inner, self.inner_average

        def evaluate(t, x, y, z, mu):
            if fast is not None:
                a = fast(t, y, z, mu)
            else:
                a = _chunked_average(inner, t, y, z, mu)
            return outer(t, y, z, a)

        L = self.lipschitz_F * (1 + 2 * self.lipschitz_f)
        return DriverSpec(
            evaluate, lipschitz_y=L, lipschitz_z=L, lipschitz_mu=self.lipschitz_F * self.lipschitz_f,
            growth_bound=L, depends_on_z=self.depends_on_z, depends_on_law=True, name=self.name,
        )


@dataclass
class SystemSolution:
    grid: object
    n: int
    y: np.ndarray  # (N+1, n, m), one joint realisation
    z_diag: np.ndarray  # (N, n, m, d)
    interaction_kind: str
    systems: int
    batch: BsdeSolution = field(repr=False, default=None)
    view: PathView = field(repr=False, default=None)

    def mean_path(self) -> np.ndarray:
        """Particle average (1/n) sum_i Y^{i,n}_t per node, shape (N+1, m)."""
        return self.y.mean(axis=1)


@dataclass
class MkvSolution:
    solution: BsdeSolution
    law_flow: list  # EmpiricalMeasure per node
    converged: bool
    iterations: int
    log: list
    reference_mean_flow: Optional[np.ndarray] = None

    @property
    def grid(self):
        return self.solution.grid

    @property
    def cloud_size(self) -> int:
        return self.solution.y.shape[1]

    def cloud(self, k: int) -> np.ndarray:
        return self.solution.y[k]

    def mean_flow(self) -> np.ndarray:
        return np.stack([mu.mean() for mu in self.law_flow])

    def evaluate(self, view):
        """Limit solution read out along other paths (the coupled i.i.d. copies)."""
        if isinstance(view, BrownianBundle):
            view = PathView.from_bundle(view)
        return self.solution.evaluate(view)

    def reference_indices(self, seed: int, replication_id: int, n: int) -> np.ndarray:
        """``n`` distinct cloud indices, keyed by ``(seed, replication_id)``."""
        M = self.cloud_size
        if n > M:
            raise ValidationError(f"reference draw of {n} exceeds cloud size {M}")
        u = uniforms(seed, replication_id, np.arange(M), np.zeros(1, dtype=np.int64), STREAM_DRAWS)[:, 0, 0]
        return np.argsort(u, kind="stable")[:n]


def _validate_bundle(bundle: BrownianBundle):
    if not isinstance(bundle, BrownianBundle):
        raise ValidationError("expected a BrownianBundle")
    if bundle.n < 1:
        raise ValidationError("particle count must be >= 1")


def _system_basis(basis: BasisSpec) -> BasisSpec:
    return basis if basis.shared_degree else replace(basis, shared_degree=1)


def solve_interacting(spec: InteractionSpec, bundle: BrownianBundle, basis: BasisSpec,
                      scheme_params: SchemeParams = SchemeParams(), *, shared_features: bool = True) -> SystemSolution:
    """Joint backward solve of the n-particle system driven by ``bundle``.

    The bundle's paths form the reported realisation; extra independent
    systems drawn from the same stream (fresh particle indices) only enlarge
    the regression sample.  Particles are processed in canonical stream order
    so permuting the bundle's particle streams permutes the output exactly.
    """
    _validate_bundle(bundle)
    n, d, grid = bundle.n, bundle.d, bundle.grid
    S = scheme_params.systems_for(n)
    order = np.argsort(bundle.particles, kind="stable")
    own = bundle.increments[order]
    if S > 1:
        base = int(bundle.particles.max()) + 1
        aux = sample_brownian(bundle.seed, bundle.replication_id, n * (S - 1), d, grid,
                              stream=bundle.stream, particles=base + np.arange(n * (S - 1)))
        inc = np.concatenate([own, aux.increments])
    else:
        inc = own
    full = BrownianBundle(grid, n * S, d, inc, bundle.seed, bundle.replication_id, bundle.stream,
                          np.arange(n * S))
    view = PathView.from_bundle(full, groups=S)
    driver = spec.as_driver()
    b = _system_basis(basis) if shared_features else basis
    law = "system" if driver.depends_on_law else None
    y, z, fits, diags, tl = _solve(driver, spec.terminal, view, b, law, scheme_params.scheme)
    batch = _package(y, z, fits, diags, tl, view, driver, spec.terminal, b, scheme_params.scheme, None)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(n)
    return SystemSolution(
        grid=grid,
        n=n,
        y=y[:, 0][:, inverse],
        z_diag=z[:, 0][:, inverse],
        interaction_kind=spec.kind,
        systems=S,
        batch=batch,
        view=view,
    )


def solve_linear_interaction(spec: InteractionSpec, bundle: BrownianBundle, basis: BasisSpec,
                             scheme_params: SchemeParams = SchemeParams()) -> SystemSolution:
    if spec.kind != "linear-f":
        raise ValidationError("solve_linear_interaction requires interaction_kind 'linear-f'")
    return solve_interacting(spec, bundle, basis, scheme_params)


def solve_mkv(spec: InteractionSpec, cloud_size: int, bundle: BrownianBundle, basis: BasisSpec,
              picard_params: PicardParams = PicardParams()) -> MkvSolution:
    """McKean-Vlasov limit from an i.i.d. cloud of ``cloud_size`` paths."""
    _validate_bundle(bundle)
    if cloud_size < 2:
        raise ValidationError("cloud_size must be >= 2")
    if bundle.n < cloud_size:
        bundle = sample_brownian(bundle.seed, bundle.replication_id, cloud_size, bundle.d, bundle.grid,
                                 stream=bundle.stream)
    elif bundle.n > cloud_size:
        bundle = bundle.head(cloud_size)
    view = PathView.from_bundle(bundle)
    basis = replace(basis, shared_degree=0)
    driver = spec.as_driver()
    if driver.depends_on_law:
        res = picard_iterate(driver, spec.terminal, view, basis, None,
                             picard_params.max_iters, picard_params.tol, scheme=picard_params.scheme)
        sol, flow, log = res.solution, res.law_flow, res.log
        converged, iterations = res.converged, res.iterations
    else:
        sol = solve_backward(driver, spec.terminal, view, basis, scheme=picard_params.scheme)
        flow = [sol.y[k][None] for k in range(view.grid.N + 1)]
        log, converged, iterations = [0.0], True, 0
    measures = [EmpiricalMeasure(f[0]) for f in flow]
    ref = None
    if spec.mean_flow is not None:
        ref = np.asarray([spec.mean_flow(t) for t in view.grid.nodes], dtype=float)
    return MkvSolution(sol, measures, converged, iterations, log, ref)


# presets ---------------------------------------------------------------------

def _group_mean(mu):
    return mu.mean(axis=1, keepdims=True)


def _null(**_):
    drv = DriverSpec(lambda t, x, y, z, mu: np.zeros_like(y), 0.0, 0.0, 0.0, 0.0, name="null")
    return dict(kind="none", driver=drv, mean_flow_factor=lambda t, T: 1.0)


def _mean_linear(alpha=0.5, **_):
    drv = DriverSpec(
        lambda t, x, y, z, mu: np.broadcast_to(alpha * _group_mean(mu), y.shape).copy(),
        lipschitz_y=0.0, lipschitz_z=0.0, lipschitz_mu=abs(alpha),
        growth_bound=abs(alpha), depends_on_law=True, name="mean-linear",
    )
    return dict(kind="general-measure", driver=drv, lipschitz_F=abs(alpha),
                mean_flow_factor=lambda t, T: math.exp(alpha * (T - t)))


def _mean_reversion(kappa=1.0, **_):
    drv = DriverSpec(
        lambda t, x, y, z, mu: kappa * (_group_mean(mu) - y),
        lipschitz_y=abs(kappa), lipschitz_z=0.0, lipschitz_mu=abs(kappa),
        growth_bound=2 * abs(kappa), depends_on_law=True, name="mean-reversion",
    )
    return dict(kind="general-measure", driver=drv, lipschitz_F=abs(kappa),
                mean_flow_factor=lambda t, T: 1.0)


def _convolution(kappa=1.0, **_):
    # phi(x) = -kappa x, f(y1, y2) = phi(y1 - y2), F(a) = a
    return dict(
        kind="linear-f",
        outer=lambda t, y, z, a: a,
        inner=lambda t, y1, y2, z: -kappa * (y1 - y2),
        inner_average=lambda t, y, z, mu: kappa * (_group_mean(mu) - y),
        lipschitz_F=1.0, lipschitz_f=abs(kappa),
        mean_flow_factor=lambda t, T: 1.0,
    )


def _mean_kernel(alpha=0.5, **_):
    # f(y1, y2) = y2, F(a) = alpha a
    return dict(
        kind="linear-f",
        outer=lambda t, y, z, a: alpha * a,
        inner=lambda t, y1, y2, z: np.broadcast_to(y2, np.broadcast_shapes(y1.shape, y2.shape)),
        inner_average=lambda t, y, z, mu: np.broadcast_to(_group_mean(mu), y.shape).copy(),
        lipschitz_F=abs(alpha), lipschitz_f=1.0,
        mean_flow_factor=lambda t, T: math.exp(alpha * (T - t)),
    )


def _linear_y(a=1.0, **_):
    drv = DriverSpec(lambda t, x, y, z, mu: a * y, lipschitz_y=abs(a), lipschitz_z=0.0,
                     lipschitz_mu=0.0, growth_bound=abs(a), name="linear-y")
    return dict(kind="none", driver=drv, mean_flow_factor=lambda t, T: math.exp(a * (T - t)))


def _constant_drift(c=1.0, **_):
    drv = DriverSpec(lambda t, x, y, z, mu: np.full_like(y, c), 0.0, 0.0, 0.0,
                     growth_bound=abs(c), name="constant-drift")
    return dict(kind="none", driver=drv, mean_flow_factor=None, drift=c)


INTERACTION_PRESETS = {
    "null": _null,
    "mean-linear": _mean_linear,
    "mean-reversion": _mean_reversion,
    "convolution": _convolution,
    "mean-kernel": _mean_kernel,
    "linear-y": _linear_y,
    "constant-drift": _constant_drift,
}


def _brownian_terminal(g=1.0, scale=1.0, **_):
    def evaluate(paths, law_T):
        return g + scale * paths[-1]
    return TerminalSpec(evaluate, moment_order=8.0, lipschitz_const=abs(scale) or None, name="brownian"), g


def _constant_terminal(c=1.0, **_):
    def evaluate(paths, law_T):
        return np.full(paths.shape[1:], float(c))
    return TerminalSpec(evaluate, moment_order=8.0, lipschitz_const=None, name="constant"), c


def _running_max_terminal(scale=1.0, **_):
    # sup-norm Lipschitz path functional with constant |scale|
    def evaluate(paths, law_T):
        return scale * paths.max(axis=0)
    mean = None  # E[max of discrete path] has no simple closed form
    return TerminalSpec(evaluate, moment_order=8.0, lipschitz_const=abs(scale) or None,
                        name="running-max"), mean


TERMINAL_PRESETS = {
    "brownian": _brownian_terminal,
    "constant": _constant_terminal,
    "running-max": _running_max_terminal,
}


def terminal_preset(name: str, **params):
    """Terminal spec and its mean (``None`` when not available)."""
    try:
        factory = TERMINAL_PRESETS[name]
    except KeyError:
        raise ValidationError(
            f"unknown terminal preset {name!r}; registered: {', '.join(sorted(TERMINAL_PRESETS))}") from None
    return factory(**params)


def interaction_preset(name: str, terminal: str = "brownian", T: float = 1.0,
                       terminal_params: Optional[dict] = None, **params) -> InteractionSpec:
    """Build a registered interaction preset with a terminal preset."""
    try:
        factory = INTERACTION_PRESETS[name]
    except KeyError:
        raise ValidationError(
            f"unknown interaction preset {name!r}; registered: {', '.join(sorted(INTERACTION_PRESETS))}") from None
    blocks = factory(**params)
    term, g_mean = terminal_preset(terminal, **(terminal_params or {}))
    factor = blocks.pop("mean_flow_factor", None)
    drift = blocks.pop("drift", None)
    mean_flow = None
    if g_mean is not None and factor is not None:
        mean_flow = lambda t, _f=factor, _g=g_mean: _g * _f(t, T)
    elif g_mean is not None and drift is not None:
        mean_flow = lambda t, _c=drift, _g=g_mean: _g + _c * (T - t)
    return InteractionSpec(terminal=term, mean_flow=mean_flow, name=name, **blocks)
