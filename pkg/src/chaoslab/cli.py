"""Command-line runner: ``chaoslab <subcommand> --scenario FILE [--seed S] [--out DIR]``.

Every run writes ``<out>/<scenario-hash>/<subcommand>.csv`` plus a JSON
sidecar ``<subcommand>.json``.  The seed precedence is ``--seed``, then the
``CHAOSLAB_SEED`` environment variable, then the scenario file.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .chaos import (
    chaos_block_bound,
    estimate_marginal_chaos,
    estimate_process_error,
    estimate_sup_chaos,
    estimate_tail,
)
from .errors import ConvergenceWarning, PreconditionError, ValidationError
from .kernel import STREAM_CLOUD, STREAM_SYSTEM, sample_brownian
from .meanfield import solve_interacting, solve_mkv
from .pde import compare_pde, solve_particle_fbsde
from .scenario import Scenario
from .transport import (
    path_wasserstein_supnorm,
    wasserstein_assignment,
    wasserstein_entropic,
)

SCHEMA_VERSION = 1
SEED_ENV = "CHAOSLAB_SEED"
SUBCOMMANDS = ("simulate", "rate-study", "sup-study", "tails", "process-error", "blocks",
               "pde-compare", "transport")

# documented column contracts
COLUMNS = {
    "simulate": ["node", "t", "particle", "component", "y"],
    "simulate-pde": ["node", "t", "particle", "component", "x", "y"],
    "simulate-mkv": ["node", "t", "component", "mean", "second_moment"],
    "rate-study": ["n", "estimate", "stderr", "reference"],
    "sup-study": ["n", "estimate", "stderr", "reference"],
    "process-error": ["n", "estimate", "stderr", "reference"],
    "tails": ["epsilon", "n", "hits", "reps", "probability", "ci_low", "ci_high", "reference_a", "reference_b"],
    "blocks": ["k_block", "n", "estimate", "stderr", "single_particle", "single_stderr", "exchangeable"],
    "pde-compare": ["n", "gap_estimate", "stderr", "epsilon_n", "epsilon_n_plus_r"],
    "transport": ["kind", "p", "distance", "converged"],
}

EXIT_OK, EXIT_VALIDATION, EXIT_PRECONDITION, EXIT_SOLVER = 0, 2, 3, 4
ERROR_CODES = {EXIT_VALIDATION: "validation", EXIT_PRECONDITION: "precondition", EXIT_SOLVER: "solver"}


class SolverFailure(RuntimeError):
    pass


@dataclass
class ResultRecord:
    scenario_hash: str
    operation: str
    timestamp: str
    input_digest: str
    payload: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    status: str = "ok"
    error: Optional[dict] = None

    def sidecar(self, payload_digest: Optional[str]) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "code_version": __version__,
            "scenario_hash": self.scenario_hash,
            "operation": self.operation,
            "timestamp": self.timestamp,
            "input_digest": self.input_digest,
            "payload_digest": payload_digest,
            "status": self.status,
            "error": self.error,
            "files": self.files,
            "payload": self.payload,
        }


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def csv_bytes(columns, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue().encode()


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, tuples become lists."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _study_payload(study):
    return {
        "label": study.label,
        "reps": study.reps,
        "slope": study.slope,
        "intercept": study.intercept,
        "slope_ci": study.slope_ci,
        "excluded": study.excluded,
        "normalised_excess": study.normalised_excess() if study.slope is not None else None,
    }


# subcommands ------------------------------------------------------------------
# each returns (columns, rows, payload, figure callback or None)

def _simulate(sc: Scenario, args):
    grid = sc.grid()
    d = sc["dimensions"]["d"]
    n = args.n or sc["sizes"]["ns"][0]
    rep = args.rep
    nodes = grid.nodes
    if sc["kind"] == "pde":
        scen = sc.pde()
        bundle = sample_brownian(sc["seed"], rep, n, d, grid, stream=STREAM_SYSTEM)
        sol = solve_particle_fbsde(scen, n, bundle, sc.basis(), sc.scheme_params())
        rows = [{"node": k, "t": nodes[k], "particle": i, "component": c, "x": sol.X[k, i, c] if c < d else None,
                 "y": sol.Y[k, i, c] if c < sol.Y.shape[-1] else None}
                for k in range(grid.N + 1) for i in range(n) for c in range(max(d, sol.Y.shape[-1]))]
        payload = {"n": n, "rep": rep, "v0": sol.v0[:, 0].tolist()}
        return COLUMNS["simulate-pde"], rows, payload, lambda path: _plot_paths(nodes, sol.Y, path)
    if sc["kind"] == "mkv":
        cloud = sc["sizes"]["cloud_size"]
        bundle = sample_brownian(sc["seed"], rep, cloud, d, grid, stream=STREAM_CLOUD)
        mkv = solve_mkv(sc.interaction(), cloud, bundle, sc.basis(), sc.picard_params())
        if not mkv.converged:
            raise SolverFailure(f"Picard iteration did not converge in {sc['picard']['max_iters']} passes")
        y = mkv.solution.y
        rows = [{"node": k, "t": nodes[k], "component": c, "mean": float(np.mean(y[k, :, c])),
                 "second_moment": float(np.mean(y[k, :, c] ** 2))}
                for k in range(grid.N + 1) for c in range(y.shape[-1])]
        payload = {"cloud_size": cloud, "converged": mkv.converged, "iterations": mkv.iterations,
                   "picard_log": list(mkv.log)}
        return COLUMNS["simulate-mkv"], rows, payload, lambda path: _plot_paths(nodes, y, path)
    bundle = sample_brownian(sc["seed"], rep, n, d, grid, stream=STREAM_SYSTEM)
    sol = solve_interacting(sc.interaction(), bundle, sc.basis(), sc.scheme_params())
    m = sol.y.shape[-1]
    rows = [{"node": k, "t": nodes[k], "particle": i, "component": c, "y": sol.y[k, i, c]}
            for k in range(grid.N + 1) for i in range(n) for c in range(m)]
    payload = {"n": n, "rep": rep, "systems": sol.systems, "interaction": sol.interaction_kind}
    return COLUMNS["simulate"], rows, payload, lambda path: _plot_paths(nodes, sol.y, path)


def _plot_paths(nodes, y, path):
    from .plotting import plot_paths
    plot_paths(nodes, y, path)


def _plot_study(study, path, ylabel):
    from .plotting import plot_rate
    plot_rate(study.ns, study.errors, study.stderrs, study.reference, path, ylabel=ylabel)


_YLABELS = {
    "rate-study": "E[W_p^p] at t",
    "sup-study": "E[max_t W_p^p]",
    "process-error": "E[sup_t |Y gap|^2] + Z gap",
}


def _study(kind):
    def run(sc: Scenario, args):
        exp = sc.experiment(workers=args.workers)
        sz, p = sc["sizes"], sc["rates"]["p"]
        if kind == "rate-study":
            study = estimate_marginal_chaos(exp, sc["study"]["t"], sz["ns"], sz["reps"], p)
        elif kind == "sup-study":
            study = estimate_sup_chaos(exp, sz["ns"], sz["reps"], p)
        else:
            study = estimate_process_error(exp, sz["ns"], sz["reps"])
        _check_reference(exp)
        payload = _study_payload(study)
        if kind == "process-error":
            payload["y_component"] = getattr(study, "y_component", None)
        return COLUMNS[kind], list(study.rows()), payload, lambda path: _plot_study(study, path, _YLABELS[kind])
    return run


def _check_reference(exp):
    mkv = exp.reference()
    if not mkv.converged:
        raise SolverFailure("reference McKean-Vlasov solve did not converge")


def _tails(sc: Scenario, args):
    exp = sc.experiment(workers=args.workers)
    st = sc["study"]
    rows = estimate_tail(exp, st["t"], st["tail_n"], sc["rates"]["p"], st["epsilons"], sc["sizes"]["reps"],
                         delta=sc["rates"].get("delta"), k=sc["rates"]["k"])
    _check_reference(exp)
    out = [{"epsilon": r.epsilon, "n": r.n, "hits": r.hits, "reps": r.reps, "probability": r.probability,
            "ci_low": r.ci[0], "ci_high": r.ci[1], "reference_a": r.reference_a, "reference_b": r.reference_b}
           for r in rows]

    def fig(path):
        from .plotting import plot_tails
        plot_tails(rows, path)
    return COLUMNS["tails"], out, {"t": st["t"], "n": st["tail_n"]}, fig


def _blocks(sc: Scenario, args):
    exp = sc.experiment(workers=args.workers)
    st = sc["study"]
    rows = []
    for kb in st["k_blocks"]:
        b = chaos_block_bound(exp, st["block_n"], kb, sc["sizes"]["reps"])
        rows.append({"k_block": b.k_block, "n": b.n, "estimate": b.value, "stderr": b.stderr,
                     "single_particle": b.single, "single_stderr": b.single_stderr,
                     "exchangeable": b.exchangeable})
    _check_reference(exp)
    return COLUMNS["blocks"], rows, {"n": st["block_n"]}, None


def _pde_compare(sc: Scenario, args):
    if sc["kind"] != "pde":
        raise ValidationError("pde-compare needs a scenario with kind = 'pde'")
    st, sz = sc["study"], sc["sizes"]
    res = compare_pde(sc.pde(), sz["ns"], sz["reps"], sz["cloud_size"], grid=sc.grid(), seed=sc["seed"],
                      basis=sc.basis(), scheme_params=sc.scheme_params(), picard_params=sc.picard_params(),
                      empirical_gap=st["empirical_gap"], empirical_cloud=st["empirical_cloud"],
                      workers=args.workers)
    rows = [{"n": r.n, "gap_estimate": r.gap, "stderr": r.gap_stderr, "epsilon_n": r.epsilon_n,
             "epsilon_n_plus_r": r.epsilon_n_plus_r} for r in res]
    from .chaos import RateStudy
    study = RateStudy([r.n for r in res], [r.gap for r in res], [r.gap_stderr for r in res],
                      [r.epsilon_n for r in res], sz["reps"], "pde")
    payload = {"slope": study.slope, "slope_ci": study.slope_ci,
               "empirical_gap": [r.empirical_gap for r in res],
               "empirical_gap_stderr": [r.empirical_gap_stderr for r in res]}
    return COLUMNS["pde-compare"], rows, payload, lambda path: _plot_study(study, path, "squared gap")


def _read_cloud(path):
    try:
        with open(path) as fh:
            first = fh.readline()
        skip = 0
        try:
            [float(v) for v in first.strip().split(",")]
        except ValueError:
            skip = 1
        arr = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read point cloud {path}: {exc}") from None
    return arr


def _transport(sc: Optional[Scenario], args):
    if not args.a or not args.b:
        raise ValidationError("transport needs --a and --b point-cloud CSV files")
    A, B = _read_cloud(args.a), _read_cloud(args.b)
    p, kind = args.p, args.kind
    converged = True
    if kind == "exact":
        dist = wasserstein_assignment(p, A, B)
    elif kind == "entropic":
        dist, converged = wasserstein_entropic(p, A, B, args.reg)
    else:
        m = args.path_dim
        if A.shape[1] % m or B.shape[1] % m:
            raise ValidationError("path rows must hold (N+1)*m values")
        dist = path_wasserstein_supnorm(p, A.reshape(A.shape[0], -1, m), B.reshape(B.shape[0], -1, m))
    rows = [{"kind": kind, "p": p, "distance": dist, "converged": converged}]
    return COLUMNS["transport"], rows, {"n_a": A.shape[0], "n_b": B.shape[0]}, None


HANDLERS = {
    "simulate": _simulate,
    "rate-study": _study("rate-study"),
    "sup-study": _study("sup-study"),
    "process-error": _study("process-error"),
    "tails": _tails,
    "blocks": _blocks,
    "pde-compare": _pde_compare,
    "transport": _transport,
}


# driver ----------------------------------------------------------------------

def _kv(x):
    return x.replace("-", "_")


def resolve_seed(flag: Optional[int], env=None) -> Optional[int]:
    env = os.environ if env is None else env
    if flag is not None:
        return flag
    raw = env.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _input_digest(sc: Optional[Scenario], command: str, args) -> str:
    h = hashlib.sha256()
    h.update(__version__.encode())
    h.update(command.encode())
    if sc is not None:
        h.update(sc.hash.encode())
    opts = {k: getattr(args, k) for k in ("n", "rep", "kind", "p", "reg", "path_dim")}
    for k in ("a", "b"):
        path = getattr(args, k)
        if path and os.path.exists(path):
            opts[k] = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    h.update(json.dumps(opts, sort_keys=True).encode())
    return h.hexdigest()


def run(command: str, scenario: Optional[Scenario], out: Path, args) -> tuple:
    """Execute one subcommand; returns ``(exit_code, ResultRecord)``."""
    if command not in SUBCOMMANDS:
        raise ValidationError(f"unknown subcommand {command!r}")
    tag = scenario.hash if scenario is not None else "transport"
    out_dir = Path(out) / tag
    record = ResultRecord(tag, command, datetime.now(timezone.utc).isoformat(),
                          _input_digest(scenario, command, args))
    code = EXIT_OK
    payload_digest = None
    try:
        if scenario is None and command != "transport":
            raise ValidationError(f"{command} needs --scenario")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConvergenceWarning)
            columns, rows, payload, fig = HANDLERS[command](scenario, args)
        payload["warnings"] = sorted({str(w.message) for w in caught if issubclass(w.category, ConvergenceWarning)})
        data = csv_bytes(columns, rows)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{command}.csv").write_bytes(data)
        record.files.append(f"{command}.csv")
        payload_digest = hashlib.sha256(data).hexdigest()
        record.payload = _clean(payload)
        if args.plot and fig is not None:
            fig(out_dir / f"{command}.png")
            record.files.append(f"{command}.png")
    except PreconditionError as exc:
        code = EXIT_PRECONDITION
        record.error = {"code": ERROR_CODES[code], "message": str(exc)}
    except ValidationError as exc:
        code = EXIT_VALIDATION
        record.error = {"code": ERROR_CODES[code], "message": str(exc)}
    except (SolverFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        code = EXIT_SOLVER
        record.error = {"code": ERROR_CODES[code], "message": str(exc)}
    if code != EXIT_OK:
        record.status = "error"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}.json").write_text(json.dumps(record.sidecar(payload_digest), indent=2, sort_keys=True))
    return code, record


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chaoslab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"chaoslab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--scenario", required=name != "transport", help="scenario TOML file")
        sp.add_argument("--seed", type=int, default=None, help=f"overrides {SEED_ENV} and the file")
        sp.add_argument("--out", default="out", help="output root (default: ./out)")
        sp.add_argument("--workers", type=int, default=1, help="threads over replications")
        sp.add_argument("--plot", action="store_true", help="also render a PNG figure")
        sp.add_argument("--n", type=int, default=None, help="simulate: particle count (default: first of sizes.ns)")
        sp.add_argument("--rep", type=int, default=0, help="simulate: replication id")
        sp.add_argument("--a", help="transport: first point cloud CSV")
        sp.add_argument("--b", help="transport: second point cloud CSV")
        sp.add_argument("--kind", choices=("exact", "entropic", "path"), default="exact")
        sp.add_argument("--p", type=float, default=2.0)
        sp.add_argument("--reg", type=float, default=0.05, help="entropic: regularisation relative to max cost")
        sp.add_argument("--path-dim", type=int, default=1, help="path: state dimension m per node")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("chaoslab: --workers must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    scenario = None
    try:
        seed = resolve_seed(args.seed)
        if args.scenario:
            scenario = Scenario.load(args.scenario)
            if seed is not None:
                scenario = scenario.with_seed(seed)
    except ValidationError as exc:
        print(f"chaoslab: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    code, record = run(args.command, scenario, Path(args.out), args)
    where = Path(args.out) / record.scenario_hash
    if code == EXIT_OK:
        print(f"{args.command}: wrote {', '.join(record.files)} to {where}")
    else:
        print(f"chaoslab {args.command} failed [{record.error['code']}]: {record.error['message']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
