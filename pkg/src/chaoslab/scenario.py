"""Scenario files (TOML) for the command-line runner.

A scenario fixes the grid, the driver/terminal presets, the particle-count
ladder, the rate parameters and the study settings.  Missing fields take
the defaults below; the content hash is computed on the validated,
default-filled scenario so that field order in the file does not matter.
"""
from __future__ import annotations

import copy
import hashlib
import inspect
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import tomli

from .chaos import Experiment, RateParams
from .errors import ValidationError
from .kernel import make_grid
from .meanfield import (
    INTERACTION_PRESETS,
    TERMINAL_PRESETS,
    PicardParams,
    SchemeParams,
    interaction_preset,
)
from .pde import PDE_PRESETS, pde_preset
from .regression import SCHEMES, BasisSpec

KINDS = ("interacting", "linear-interaction", "mkv", "pde")

DEFAULTS: dict = {
    "name": "scenario",
    "kind": "interacting",
    "seed": 0,
    "grid": {"T": 1.0, "N": 64},
    "dimensions": {"d": 1, "m": None},
    "driver": {"preset": "mean-linear"},
    "terminal": {"preset": "brownian"},
    "pde": {"preset": "affine", "initial_mean": 0.0, "initial_std": 1.0, "moment_order": 8.0},
    "sizes": {
        "ns": [8, 16, 32, 64, 128, 256, 512],
        "cloud_size": 4096,
        "reference_cloud": 16384,
        "reps": 64,
        "batch": 8192,
        "min_systems": 64,
    },
    "rates": {"p": 1.0, "q": 3.0, "k": 8.0},
    "basis": {"degree": 1, "shared_degree": 1, "scheme": "heun"},
    "picard": {"tol": 1e-4, "max_iters": 50},
    "study": {
        "t": 0.5,
        "epsilons": [0.1, 0.2],
        "tail_n": 64,
        "k_blocks": [1, 2, 4],
        "block_n": 64,
        "empirical_gap": True,
        "empirical_cloud": 2048,
    },
}

_TOP_LEVEL = set(DEFAULTS)


class ScenarioError(ValidationError):
    """Malformed or out-of-range scenario content."""


def _fail(field: str, msg: str):
    raise ScenarioError(f"field {field!r}: {msg}")


def _merge(base: dict, extra: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        name = f"{prefix}{key}"
        if isinstance(out.get(key), dict):
            if not isinstance(val, dict):
                _fail(name, "expected a table")
            # preset tables accept preset-specific parameters
            if key in ("driver", "terminal", "pde"):
                out[key].update(val)
            else:
                for sub in val:
                    if sub not in out[key]:
                        _fail(f"{name}.{sub}", "unknown field")
                out[key] = _merge(out[key], val, name + ".")
        else:
            out[key] = val
    return out


def _num(sc, section, key, *, integer=False, lo=None, lo_open=False, hi=None):
    val = sc[section][key] if section else sc[key]
    field = f"{section}.{key}" if section else key
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        _fail(field, f"expected a number, got {val!r}")
    if integer and (not float(val).is_integer()):
        _fail(field, f"expected an integer, got {val!r}")
    if not math.isfinite(val):
        _fail(field, "must be finite")
    if lo is not None and (val <= lo if lo_open else val < lo):
        _fail(field, f"must be {'>' if lo_open else '>='} {lo}, got {val!r}")
    if hi is not None and val > hi:
        _fail(field, f"must be <= {hi}, got {val!r}")
    return int(val) if integer else float(val)


def _preset_params(table: dict, registry: dict, field: str, reserved=()) -> dict:
    name = table.get("preset")
    if name not in registry:
        _fail(f"{field}.preset", f"unknown preset {name!r}; registered: {', '.join(sorted(registry))}")
    allowed = {p.name for p in inspect.signature(registry[name]).parameters.values()
               if p.kind not in (p.VAR_KEYWORD, p.VAR_POSITIONAL)}
    params = {}
    for key, val in table.items():
        if key == "preset" or key in reserved:
            continue
        if key not in allowed:
            _fail(f"{field}.{key}", f"not a parameter of preset {name!r} (expected one of {sorted(allowed)})")
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            _fail(f"{field}.{key}", f"expected a finite number, got {val!r}")
        params[key] = float(val)
    return params


def validate(raw: dict) -> dict:
    """Fill defaults and check every field; returns the canonical scenario dict."""
    for key in raw:
        if key not in _TOP_LEVEL:
            _fail(key, "unknown field")
    sc = _merge(DEFAULTS, raw)
    if sc["kind"] not in KINDS:
        _fail("kind", f"expected one of {KINDS}, got {sc['kind']!r}")
    if not isinstance(sc["name"], str):
        _fail("name", "expected a string")
    sc["seed"] = _num(sc, None, "seed", integer=True, lo=0, hi=2**64 - 1)
    sc["grid"]["T"] = _num(sc, "grid", "T", lo=0, lo_open=True)
    sc["grid"]["N"] = _num(sc, "grid", "N", integer=True, lo=1)
    sc["dimensions"]["d"] = _num(sc, "dimensions", "d", integer=True, lo=1)
    # presets act coordinate-wise on W (m = d) or solve a scalar PDE value (m = 1)
    implied_m = 1 if sc["kind"] == "pde" else sc["dimensions"]["d"]
    if sc["dimensions"]["m"] is None:
        sc["dimensions"]["m"] = implied_m
    elif _num(sc, "dimensions", "m", integer=True, lo=1) != implied_m:
        _fail("dimensions.m", f"the {sc['kind']} presets produce m = {implied_m}")
    sz = sc["sizes"]
    ns = sz["ns"]
    if not isinstance(ns, list) or not ns or any(isinstance(v, bool) or not isinstance(v, int) or v < 1 for v in ns):
        _fail("sizes.ns", "expected a nonempty list of positive integers")
    if sorted(set(ns)) != ns:
        _fail("sizes.ns", "must be strictly increasing")
    for key in ("cloud_size", "reference_cloud"):
        sz[key] = _num(sc, "sizes", key, integer=True, lo=2)
    for key in ("reps", "batch", "min_systems"):
        sz[key] = _num(sc, "sizes", key, integer=True, lo=1)
    r = sc["rates"]
    for key in list(r):
        if key not in ("p", "q", "k", "delta"):
            _fail(f"rates.{key}", "unknown field")
        r[key] = _num(sc, "rates", key, lo=0, lo_open=True)
    try:
        RateParams(p=r["p"], q=r["q"], k=r["k"], m=sc["dimensions"]["m"], d=sc["dimensions"]["d"])
    except ValidationError as exc:
        _fail("rates", str(exc))
    b = sc["basis"]
    b["degree"] = _num(sc, "basis", "degree", integer=True, lo=0, hi=3)
    b["shared_degree"] = _num(sc, "basis", "shared_degree", integer=True, lo=0, hi=3)
    if b["scheme"] not in SCHEMES:
        _fail("basis.scheme", f"expected one of {SCHEMES}, got {b['scheme']!r}")
    sc["picard"]["tol"] = _num(sc, "picard", "tol", lo=0, lo_open=True)
    sc["picard"]["max_iters"] = _num(sc, "picard", "max_iters", integer=True, lo=1)
    st = sc["study"]
    st["t"] = _num(sc, "study", "t", lo=0, hi=sc["grid"]["T"])
    eps = st["epsilons"]
    if not isinstance(eps, list) or not eps or any(isinstance(e, bool) or not isinstance(e, (int, float)) or e < 0
                                                    for e in eps):
        _fail("study.epsilons", "expected a nonempty list of nonnegative numbers")
    st["epsilons"] = [float(e) for e in eps]
    st["tail_n"] = _num(sc, "study", "tail_n", integer=True, lo=1)
    st["block_n"] = _num(sc, "study", "block_n", integer=True, lo=1)
    kb = st["k_blocks"]
    if not isinstance(kb, list) or not kb or any(isinstance(v, bool) or not isinstance(v, int) or v < 1 for v in kb):
        _fail("study.k_blocks", "expected a nonempty list of positive integers")
    if max(kb) > st["block_n"]:
        _fail("study.k_blocks", "block sizes cannot exceed study.block_n")
    if not isinstance(st["empirical_gap"], bool):
        _fail("study.empirical_gap", "expected true or false")
    st["empirical_cloud"] = _num(sc, "study", "empirical_cloud", integer=True, lo=2)

    if sc["kind"] == "pde":
        _preset_params(sc["pde"], PDE_PRESETS, "pde",
                       reserved=("initial_mean", "initial_std", "moment_order"))
        _num(sc, "pde", "initial_std", lo=0)
        _num(sc, "pde", "initial_mean")
        _num(sc, "pde", "moment_order", lo=4, lo_open=True)
    else:
        _preset_params(sc["driver"], INTERACTION_PRESETS, "driver")
        _preset_params(sc["terminal"], TERMINAL_PRESETS, "terminal")
        if sc["kind"] == "linear-interaction" and sc["driver"]["preset"] not in ("convolution", "mean-kernel"):
            _fail("driver.preset", "kind 'linear-interaction' needs a preset of the form F(t, y, z, <f, mu>)")
    return sc


def canonical_json(sc: dict) -> str:
    return json.dumps(sc, sort_keys=True, separators=(",", ":"))


def scenario_hash(sc: dict) -> str:
    return hashlib.sha256(canonical_json(sc).encode()).hexdigest()[:16]


@dataclass
class Scenario:
    data: dict
    source: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: dict, source: Optional[str] = None) -> "Scenario":
        return cls(validate(raw), source)

    @classmethod
    def loads(cls, text: str, source: Optional[str] = None) -> "Scenario":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ScenarioError(f"malformed scenario file: {exc}") from None
        return cls.from_dict(raw, source)

    @classmethod
    def load(cls, path) -> "Scenario":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ScenarioError(f"cannot read scenario file {path}: {exc.strerror}") from None
        return cls.loads(text, str(path))

    def with_seed(self, seed: int) -> "Scenario":
        raw = copy.deepcopy(self.data)
        raw["seed"] = seed
        return Scenario.from_dict(raw, self.source)

    @property
    def hash(self) -> str:
        return scenario_hash(self.data)

    def __getitem__(self, key) -> Any:
        return self.data[key]

    # builders -------------------------------------------------------------

    def grid(self):
        return make_grid(self.data["grid"]["T"], self.data["grid"]["N"])

    def basis(self) -> BasisSpec:
        b = self.data["basis"]
        return BasisSpec(degree=b["degree"], shared_degree=b["shared_degree"])

    def scheme_params(self) -> SchemeParams:
        sz = self.data["sizes"]
        return SchemeParams(scheme=self.data["basis"]["scheme"], batch=sz["batch"], min_systems=sz["min_systems"])

    def picard_params(self) -> PicardParams:
        pc = self.data["picard"]
        return PicardParams(tol=pc["tol"], max_iters=pc["max_iters"], scheme=self.data["basis"]["scheme"])

    def interaction(self):
        if self.data["kind"] == "pde":
            raise ValidationError("pde scenarios have no interaction spec")
        drv, term = self.data["driver"], self.data["terminal"]
        return interaction_preset(
            drv["preset"], terminal=term["preset"], T=self.data["grid"]["T"],
            terminal_params={k: v for k, v in term.items() if k != "preset"},
            **{k: v for k, v in drv.items() if k != "preset"},
        )

    def pde(self):
        p = dict(self.data["pde"])
        name = p.pop("preset")
        return pde_preset(name, d=self.data["dimensions"]["d"], T=self.data["grid"]["T"], **p)

    def experiment(self, workers: int = 1) -> Experiment:
        return Experiment(
            spec=self.interaction(),
            grid=self.grid(),
            d=self.data["dimensions"]["d"],
            seed=self.data["seed"],
            basis=self.basis(),
            scheme=self.scheme_params(),
            picard=self.picard_params(),
            reference_cloud=self.data["sizes"]["reference_cloud"],
            workers=workers,
            rates=dict(self.data["rates"]),
        )
