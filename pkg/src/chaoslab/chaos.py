"""Estimators and reference curves for propagation-of-chaos rates."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import PreconditionError, ValidationError
from .kernel import STREAM_CLOUD, STREAM_SYSTEM, TimeGrid, sample_brownian
from .meanfield import (
    InteractionSpec,
    MkvSolution,
    PicardParams,
    SchemeParams,
    solve_interacting,
    solve_mkv,
)
from .regression import BasisSpec, _solve
from .transport import wasserstein_1d, wasserstein_assignment

__all__ = [
    "RateParams",
    "RateStudy",
    "TailEstimate",
    "BlockBound",
    "Experiment",
    "rate_curve",
    "rate_reference",
    "strong_moment_rate",
    "sup_rate",
    "coupling_constant",
    "talagrand_constant",
    "tail_envelope_a",
    "tail_envelope_b",
    "fit_rate",
    "estimate_marginal_chaos",
    "estimate_sup_chaos",
    "estimate_tail",
    "estimate_process_error",
    "chaos_block_bound",
    "lln_deviation",
    "clopper_pearson",
]


# reference curves -------------------------------------------------------------

def _rate_case(m: float, p: float) -> str:
    if p > m / 2:
        return "high"
    if p == m / 2:
        return "critical"
    return "low"


def _check_exclusions(m: float, q: float, p: float, d: Optional[float]) -> None:
    case = _rate_case(m, p)
    if case in ("high", "critical") and math.isclose(q, 2 * p):
        raise ValidationError(f"excluded case: q = 2p = {2 * p} is not allowed when p >= m/2")
    if case == "low":
        d = m if d is None else d
        if math.isclose(q, d / (m - p)):
            raise ValidationError(f"excluded case: q = d/(m-p) = {d / (m - p)} is not allowed when p < m/2")


def rate_curve(n, m: float, q: float, p: float, d: Optional[float] = None):
    """r_{n,m,q,p} without the moment-order check (vectorised in ``n``)."""
    _check_exclusions(m, q, p, d)
    n = np.asarray(n, dtype=float)
    tail = n ** (-(q - p) / q)
    case = _rate_case(m, p)
    if case == "high":
        out = n ** -0.5 + tail
    elif case == "critical":
        out = n ** -0.5 * np.log1p(n) + tail
    else:
        out = n ** (-p / m) + tail
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class RateParams:
    """Exponents of the moment bound; ``d`` only enters the low-p exclusion."""

    p: float
    q: float
    k: float
    m: int
    n: int = 1
    d: Optional[int] = None

    def __post_init__(self):
        if not 1 <= self.p <= 2:
            raise ValidationError(f"p must lie in [1, 2], got {self.p}")
        if self.k < 2:
            raise ValidationError(f"k must be >= 2, got {self.k}")
        if not self.p < self.q < self.k:
            raise ValidationError(f"rate parameters must satisfy p<q<k (got p={self.p}, q={self.q}, k={self.k})")
        if self.m < 1 or self.n < 1:
            raise ValidationError("m and n must be positive")
        _check_exclusions(self.m, self.q, self.p, self.d)


def rate_reference(params: RateParams) -> float:
    return rate_curve(params.n, params.m, params.q, params.p, params.d)


def strong_moment_rate(n, m: int, p: float):
    """n^{-p/(m+4)}, available when more than m+5 moments exist."""
    return np.asarray(n, dtype=float) ** (-p / (m + 4))


def sup_rate(n, m: int, p: float):
    """n^{-p/(m+8)} for the supremum over time inside the expectation."""
    return np.asarray(n, dtype=float) ** (-p / (m + 8))


def coupling_constant(T: float, lipschitz_F: float) -> float:
    """exp(T e^{L_F T}), the factor between system and i.i.d. empirical errors."""
    return math.exp(T * math.exp(lipschitz_F * T))


def talagrand_constant(T: float, lipschitz_F: float, lipschitz_G: float) -> float:
    return 2.0 * (lipschitz_G + T * lipschitz_F) ** 2 * math.exp(2 * T * lipschitz_F)


def tail_envelope_a(n, eps: float, m: int, p: float, c: float = 1.0):
    """Sub-Gaussian part of the concentration bound (unit constant by default)."""
    n = np.asarray(n, dtype=float)
    case = _rate_case(m, p)
    if eps <= 0:
        return np.ones_like(n) if n.ndim else 1.0
    if case == "high":
        out = np.exp(-c * n * eps ** 2)
    elif case == "critical":
        out = np.exp(-c * n * (eps / math.log(2 + 1 / eps)) ** 2)
    else:
        out = np.exp(-c * n * eps ** (m / p))
    return out if out.ndim else float(out)


def tail_envelope_b(n, eps: float, k: float, p: float, delta: float):
    """Polynomial part b_{n,k,eps} = n (n eps)^{-(k - delta)/p}."""
    if not 0 < delta < k:
        raise ValidationError("delta must lie in (0, k)")
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore"):
        out = n * (n * eps) ** (-(k - delta) / p)
    return out if out.ndim else float(out)


# regression of rates ------------------------------------------------------------

def fit_rate(ns, errors):
    """Least squares of log(error) on log(n).

    Returns ``(slope, intercept, (lo, hi))`` with a 95% t-interval on the
    slope.
    """
    ns = np.asarray(ns, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if ns.size != errors.size:
        raise ValidationError("ns and errors must have equal length")
    if ns.size < 4:
        raise ValidationError("a rate fit needs at least 4 points")
    if np.any(errors <= 0) or np.any(ns <= 0):
        raise ValidationError("rate fit requires positive errors and sizes")
    x = np.log(ns)
    y = np.log(errors)
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    dof = x.size - 2
    s2 = float(np.sum(resid ** 2) / dof)
    half = float(stats.t.ppf(0.975, dof) * math.sqrt(s2 / sxx))
    return slope, intercept, (slope - half, slope + half)


@dataclass
class RateStudy:
    ns: list
    errors: list
    stderrs: list
    reference: list
    reps: int
    label: str = ""
    excluded: list = field(default_factory=list)
    slope: Optional[float] = None
    intercept: Optional[float] = None
    slope_ci: Optional[tuple] = None
    samples: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.ns, self.ns[1:])):
            raise ValidationError("ns must be strictly increasing")
        if len(self.ns) >= 4 and all(e > 0 for e in self.errors):
            self.slope, self.intercept, self.slope_ci = fit_rate(self.ns, self.errors)

    def normalised_excess(self) -> float:
        """max_n (e_n / e_0) / (r_n / r_0); at most 1 means under the envelope."""
        e = np.asarray(self.errors, dtype=float)
        r = np.asarray(self.reference, dtype=float)
        return float(np.max((e / e[0]) / (r / r[0])))

    def rows(self):
        for n, e, s, r in zip(self.ns, self.errors, self.stderrs, self.reference):
            yield {"n": n, "estimate": e, "stderr": s, "reference": r}


@dataclass
class TailEstimate:
    epsilon: float
    n: int
    hits: int
    reps: int
    probability: float
    ci: tuple
    reference_a: float
    reference_b: float

    def __post_init__(self):
        if self.reps < 1 or not 0 <= self.probability <= 1:
            raise ValidationError("invalid tail estimate")


@dataclass
class BlockBound:
    k_block: int
    n: int
    value: float
    stderr: float
    single: float
    single_stderr: float
    exchangeable: bool

    def __float__(self):
        return self.value


def clopper_pearson(hits: int, reps: int, level: float = 0.95) -> tuple:
    alpha = 1 - level
    lo = 0.0 if hits == 0 else float(stats.beta.ppf(alpha / 2, hits, reps - hits + 1))
    hi = 1.0 if hits == reps else float(stats.beta.ppf(1 - alpha / 2, hits + 1, reps - hits))
    return lo, hi


# experiments -----------------------------------------------------------------------

@dataclass
class Experiment:
    """A particle-system scenario with cached limit solution and replications.

    Replication ``r`` of size ``n`` is driven by the bundle
    ``(seed, r, stream=system)``; reference clouds are drawn from the
    pre-solved McKean-Vlasov cloud with indices keyed by ``(seed, r)``.
    """

    spec: InteractionSpec
    grid: TimeGrid
    d: int = 1
    seed: int = 0
    basis: BasisSpec = BasisSpec(degree=1, shared_degree=1)
    scheme: SchemeParams = SchemeParams()
    picard: PicardParams = PicardParams()
    reference_cloud: int = 16384
    workers: int = 1
    rates: Optional[dict] = None
    _cache: dict = field(default_factory=dict, repr=False)
    _mkv: Optional[MkvSolution] = field(default=None, repr=False)

    @property
    def T(self) -> float:
        return self.grid.T

    @property
    def lipschitz_F(self) -> float:
        if self.spec.kind == "linear-f":
            return self.spec.lipschitz_F * (1 + 2 * self.spec.lipschitz_f)
        return self.spec.driver.lipschitz

    def reference(self) -> MkvSolution:
        if self._mkv is None:
            bundle = sample_brownian(self.seed, 0, self.reference_cloud, self.d, self.grid, stream=STREAM_CLOUD)
            self._mkv = solve_mkv(self.spec, self.reference_cloud, bundle, self.basis, self.picard)
        return self._mkv

    @property
    def m(self) -> int:
        return self.reference().solution.y.shape[-1]

    def bundle(self, n: int, rep: int):
        return sample_brownian(self.seed, rep, n, self.d, self.grid, stream=STREAM_SYSTEM)

    def system(self, n: int, rep: int):
        return solve_interacting(self.spec, self.bundle(n, rep), self.basis, self.scheme)

    def map_reps(self, fn, reps: int):
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, range(reps)))
        return [fn(r) for r in range(reps)]

    # per-replication statistics (cached) -------------------------------------

    def node_stats(self, n: int, rep: int, p: float) -> np.ndarray:
        """W_p^p between the system slice and a size-n reference draw, per node."""
        key = ("nodes", n, rep, p)
        if key not in self._cache:
            mkv = self.reference()
            sol = self.system(n, rep)
            idx = mkv.reference_indices(self.seed, rep, n)
            out = np.empty(self.grid.N + 1)
            for k in range(self.grid.N + 1):
                out[k] = _wpp(p, sol.y[k], mkv.cloud(k)[idx])
            if not np.isfinite(out).all():
                raise FloatingPointError("non-finite chaos statistic")
            self._cache[key] = out
        return self._cache[key]

    def node_stat(self, n: int, rep: int, p: float, k: int) -> float:
        """W_p^p at one node; the terminal node skips the backward solve."""
        if k != self.grid.N or ("nodes", n, rep, p) in self._cache:
            return float(self.node_stats(n, rep, p)[k])
        mkv = self.reference()
        paths = np.moveaxis(self.bundle(n, rep).paths(), 1, 0)[:, None]
        y_T = np.asarray(self.spec.terminal.evaluate(paths, paths[-1]), dtype=float).reshape(n, -1)
        idx = mkv.reference_indices(self.seed, rep, n)
        out = _wpp(p, y_T, mkv.cloud(k)[idx])
        if not math.isfinite(out):
            raise FloatingPointError("non-finite chaos statistic")
        return out

    def coupled_gaps(self, n: int, rep: int):
        """Per-particle sup-node squared Y-gap and dt-weighted Z-gap to the coupled copies.

        The copies solve the frozen-law equation on the same paths as the
        system (same batch), so both share regression samples.
        """
        key = ("gaps", n, rep)
        if key not in self._cache:
            mkv = self.reference()
            sol = self.system(n, rep)
            batch = sol.batch
            driver = self.spec.as_driver()
            flow = mkv.solution.law_flow if driver.depends_on_law else None
            # same features as the system so regression noise is shared
            y, z, *_ = _solve(driver, self.spec.terminal, sol.view, batch.basis, flow, self.scheme.scheme)
            y_sys = batch.grouped("y")[:, 0]
            z_sys = batch.grouped("z")[:, 0]
            ygap = np.max(np.sum((y_sys - y[:, 0]) ** 2, axis=-1), axis=0)
            zgap = self.grid.dt * np.sum(np.sum((z_sys - z[:, 0]) ** 2, axis=(-1, -2)), axis=0)
            self._cache[key] = (ygap, zgap)
        return self._cache[key]


def _wpp(p: float, a: np.ndarray, b: np.ndarray) -> float:
    if a.shape[-1] == 1:
        return wasserstein_1d(p, a[:, 0], b[:, 0]) ** p
    return wasserstein_assignment(p, a, b) ** p


def _check_ns(ns):
    ns = [int(n) for n in ns]
    if any(n < 1 for n in ns):
        raise ValidationError("particle counts must be positive")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValidationError("ns must be strictly increasing")
    return ns


def _aggregate(values):
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else float("nan")
    return mean, se


def _reference_curve(exp: Experiment, ns, p: float, kind: str = "moment"):
    rates = exp.rates or {}
    q = rates.get("q")
    if kind == "linear":
        return [1.0 / n for n in ns]
    if q is None:
        return [float("nan")] * len(ns)
    return [rate_curve(n, exp.m, q, p) for n in ns]


def _collect(exp: Experiment, ns, reps, stat):
    """Run ``stat(n, r)`` for every replication; non-finite runs are excluded."""
    means, ses, excluded, samples = [], [], [], []
    for n in ns:
        def one(r, n=n):
            try:
                return stat(n, r)
            except FloatingPointError:
                return None
        vals = exp.map_reps(one, reps)
        good = [v for v in vals if v is not None]
        excluded.append(len(vals) - len(good))
        if not good:
            raise ValidationError(f"every replication failed at n={n}")
        mean, se = _aggregate(good)
        means.append(mean)
        ses.append(se)
        samples.append(good)
    return means, ses, excluded, samples


def estimate_marginal_chaos(exp: Experiment, t: float, ns: Sequence[int], reps: int, p: float = 1.0) -> RateStudy:
    """E[W_p^p(L^n(Y_t), L(Y_t))] over a ladder of particle counts."""
    if reps < 30:
        raise ValidationError("marginal chaos estimation needs reps >= 30")
    ns = _check_ns(ns)
    k = exp.grid.index_of(t)
    means, ses, excluded, samples = _collect(exp, ns, reps, lambda n, r: exp.node_stat(n, r, p, k))
    return RateStudy(ns, means, ses, _reference_curve(exp, ns, p), reps, "marginal", excluded, samples=samples)


def estimate_sup_chaos(exp: Experiment, ns: Sequence[int], reps: int, p: float = 1.0) -> RateStudy:
    """E[max over nodes of W_p^p] against node-matched reference clouds."""
    if reps < 30:
        raise ValidationError("sup chaos estimation needs reps >= 30")
    ns = _check_ns(ns)
    means, ses, excluded, samples = _collect(exp, ns, reps, lambda n, r: float(np.max(exp.node_stats(n, r, p))))
    ref = [float(sup_rate(n, exp.m, p)) for n in ns]
    return RateStudy(ns, means, ses, ref, reps, "sup", excluded, samples=samples)


def required_tail_reps(exp: Experiment, n: int, p: float, eps: float, delta: float, k: float) -> int:
    """Replications needed so that reps times the envelope at ``eps`` reaches 5."""
    eft = eps / coupling_constant(exp.T, exp.lipschitz_F)
    a = tail_envelope_a(n, eft, exp.m, p) if eft <= 1 else 0.0
    b = tail_envelope_b(n, eft, k, p, delta) if eft > 0 else math.inf
    env = min(1.0, a + b)
    return math.ceil(5.0 / env) if env > 0 else math.inf


def estimate_tail(exp: Experiment, t: float, n: int, p: float, epsilons: Sequence[float], reps: int,
                  delta: Optional[float] = None, k: Optional[float] = None) -> list:
    """Exceedance frequencies of W_p(L^n(Y_t), L(Y_t)) with Clopper-Pearson intervals."""
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    epsilons = [float(e) for e in epsilons]
    if not epsilons or any(e < 0 for e in epsilons):
        raise ValidationError("epsilons must be a nonempty list of nonnegative thresholds")
    k = k if k is not None else float((exp.rates or {}).get("k", exp.spec.terminal.moment_order))
    delta = delta if delta is not None else (exp.rates or {}).get("delta") or k / 10
    need = required_tail_reps(exp, n, p, min(epsilons), delta, k)
    if reps < need:
        raise PreconditionError(
            f"tail precondition reps*tail >= 5 fails at the smallest epsilon {min(epsilons)}: "
            f"reps={reps} but the envelope demands reps >= {need}")
    kk = exp.grid.index_of(t)
    stats_ = np.asarray(exp.map_reps(lambda r: exp.node_stat(n, r, p, kk) ** (1.0 / p), reps))
    cf = coupling_constant(exp.T, exp.lipschitz_F)
    out = []
    for eps in epsilons:
        hits = int(np.sum(stats_ >= eps))
        eft = eps / cf
        a = tail_envelope_a(n, eft, exp.m, p) if eft <= 1 else 0.0
        b = tail_envelope_b(n, eft, k, p, delta) if eft > 0 else math.inf
        out.append(TailEstimate(eps, n, hits, reps, hits / reps, clopper_pearson(hits, reps), a, b))
    return out


def estimate_process_error(exp: Experiment, ns: Sequence[int], reps: int, include_z: bool = True) -> RateStudy:
    """E[sup_t |Y^{1,n}_t - Y^1_t|^2] (+ the dt-weighted Z gap) for particle 1."""
    ns = _check_ns(ns)
    def stat(n, r):
        yg, zg = exp.coupled_gaps(n, r)
        return float(yg[0] + (zg[0] if include_z else 0.0))
    means, ses, excluded, samples = _collect(exp, ns, reps, stat)
    if exp.spec.kind == "linear-f":
        ref = [1.0 / n for n in ns]
    else:
        q = (exp.rates or {}).get("q", 3.0)
        q = q if q > 2 else 3.0
        ref = [rate_curve(n, exp.m, q, 2.0) for n in ns]
    study = RateStudy(ns, means, ses, ref, reps, "process", excluded, samples=samples)
    y_only = _collect(exp, ns, reps, lambda n, r: float(exp.coupled_gaps(n, r)[0][0]))
    study.y_component = y_only[0]
    study.y_component_stderr = y_only[1]
    return study


def chaos_block_bound(exp: Experiment, n: int, k_block: int, reps: int) -> BlockBound:
    """Monte Carlo estimate of E[sum_{i<=k} sup_t |Y^{i,n}_t - Y^i_t|^2]."""
    if not 1 <= k_block <= n:
        raise ValidationError(f"k_block must lie in [1, n={n}], got {k_block}")
    blocks = np.asarray(exp.map_reps(lambda r: float(np.sum(exp.coupled_gaps(n, r)[0][:k_block])), reps))
    singles = np.asarray(exp.map_reps(lambda r: float(np.mean(exp.coupled_gaps(n, r)[0])), reps))
    value, se = _aggregate(blocks)
    single, single_se = _aggregate(singles)
    # exchangeability: block sum against k times the particle-averaged gap
    diff = blocks - k_block * singles
    dm, dse = _aggregate(diff)
    ok = bool(abs(dm) <= 3 * dse + 1e-12 * max(1.0, abs(value))) if reps > 1 else True
    return BlockBound(k_block, n, value, se, single, single_se, ok)


def lln_deviation(exp: Experiment, ns: Sequence[int], reps: int, t: float) -> list:
    """Mean of |(1/n) sum_i Y^{i,n}_t - E[Y_t]| per n (common seeds across n)."""
    ns = _check_ns(ns)
    if exp.spec.mean_flow is None:
        raise ValidationError("LLN check needs a scenario with an analytic mean flow")
    k = exp.grid.index_of(t)
    target = exp.spec.mean_flow(exp.grid.nodes[k])
    out = []
    for n in ns:
        vals = exp.map_reps(lambda r: float(abs(exp.system(n, r).mean_path()[k, 0] - target)), reps)
        out.append(_aggregate(vals))
    return out
