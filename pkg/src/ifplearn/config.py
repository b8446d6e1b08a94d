"""Run configuration: JSON documents, shipped presets, and validation.

A document has the blocks ``model``, ``candidates``, ``grids``, ``solver``,
``simulation`` and ``output``. Every key is checked; unknown keys are errors
so typos never pass silently. Errors carry a dotted path into the document.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError
from .model import (CalibratedHouseholdModel, CandidateSet, StateShockMap, check_stochastic,
                    discretize_model, stable_hash)
from .quadrature import gauss_hermite_normal
from .simulate import SimulationConfig
from .solver import SolverContext, build_context, build_savings_grid

REDUCED = {"G": 200, "H": 20, "n_paths": 5000}

_NUM = (int, float)


def _calibrated_2026() -> dict:
    return {
        "model": {
            "beta": math.exp(-0.05 / 12),
            "gamma": 2.0,
            "alpha_portfolio": 0.4,
            "log_rf": 3.084e-4,
            "mu": [7.139e-3, -1.735e-3],
            "sigma": [0.0391, 0.0577],
            "y_persistent": [1.8539, 0.0165],
            "sigma_y2": 0.5395,
        },
        "candidates": {
            "matrices": [[[0.8, 0.2], [0.3, 0.7]],
                         [[0.9855, 0.0145], [0.0968, 0.9032]]],
            "p_star": None,
            "state_order": [0, 1],
        },
        "grids": {"G": 2000, "s_max": 1000.0, "s_median": 150.0, "H": 99,
                  "quadrature_R": 7, "quadrature_Y": 7},
        "solver": {"tol": 1e-4, "max_iter": 50000},
        "simulation": {
            "n_paths": 50000, "horizon": 600, "prior": [0.5, 0.5], "true_kernel_index": 1,
            "seed": 20260101, "initial_wealth": None, "initial_state": "stationary",
            "rao_blackwell": False, "belief_mode": "exact", "shock_draws": "continuous",
        },
        "output": {"dir": "out"},
    }


def _tiny() -> dict:
    # two states, known kernel, three shock atoms: small enough for value iteration
    doc = _calibrated_2026()
    doc["model"].update({"beta": 0.95, "alpha_portfolio": 0.0, "log_rf": 0.0,
                         "y_persistent": [1.0, 0.5], "sigma_y2": 0.04})
    doc["candidates"] = {"matrices": [[[0.9, 0.1], [0.2, 0.8]]], "p_star": None, "state_order": [0, 1]}
    doc["grids"] = {"G": 200, "s_max": 60.0, "s_median": 8.0, "H": 1,
                    "quadrature_R": 1, "quadrature_Y": 3}
    doc["solver"] = {"tol": 1e-10, "max_iter": 20000}
    doc["simulation"].update({"n_paths": 1000, "horizon": 120, "prior": [1.0], "true_kernel_index": 0})
    return doc


PRESETS = {"paper-2026": _calibrated_2026, "tiny": _tiny}


def preset_document(name: str) -> dict:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}", "preset") from None


def reduce_document(doc: dict) -> dict:
    """CI scale: G=200, H=20, K=5000."""
    doc = copy.deepcopy(doc)
    doc.setdefault("grids", {}).update(G=REDUCED["G"], H=REDUCED["H"])
    doc.setdefault("simulation", {})["n_paths"] = REDUCED["n_paths"]
    return doc


def merge(base: dict, over: dict) -> dict:
    """Recursive dict update; lists and scalars in ``over`` replace those in ``base``."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# ------------------------------------------------------------------ schema

def _is_num(v):
    return isinstance(v, _NUM) and not isinstance(v, bool)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _num_list(v):
    return isinstance(v, list) and len(v) > 0 and all(_is_num(x) for x in v)


def _matrix_stack(v):
    return isinstance(v, list) and len(v) > 0 and all(
        isinstance(m, list) and all(_num_list(r) for r in m) for m in v)


def _matrix_or_null(v):
    return v is None or (isinstance(v, list) and all(_num_list(r) for r in v))


def _wealth_spec(v):
    if v is None or (_is_num(v) and v > 0):
        return True
    if isinstance(v, dict) and len(v) == 1:
        (k, arg), = v.items()
        if k == "uniform":
            return _num_list(arg) and len(arg) == 2 and 0 < arg[0] < arg[1]
        if k == "threshold_multiple":
            return _is_num(arg) and arg > 0
    return False


SCHEMA = {
    "model": {
        "beta": (_is_num, "a number", True),
        "gamma": (_is_num, "a number", True),
        "alpha_portfolio": (_is_num, "a number", True),
        "log_rf": (_is_num, "a number", True),
        "mu": (_num_list, "a list of numbers", True),
        "sigma": (_num_list, "a list of numbers", True),
        "y_persistent": (_num_list, "a list of numbers", True),
        "sigma_y2": (_is_num, "a number", True),
    },
    "candidates": {
        "matrices": (_matrix_stack, "a list of square matrices", True),
        "p_star": (_matrix_or_null, "a matrix or null", False),
        "state_order": (lambda v: isinstance(v, list) and all(_is_int(x) for x in v),
                        "a list of state indices", False),
    },
    "grids": {
        "G": (_is_int, "an integer", True),
        "s_max": (_is_num, "a number", True),
        "s_median": (_is_num, "a number", True),
        "H": (_is_int, "an integer", True),
        "quadrature_R": (_is_int, "an integer", True),
        "quadrature_Y": (_is_int, "an integer", True),
    },
    "solver": {
        "tol": (lambda v: _is_num(v) and v > 0, "a positive number", True),
        "max_iter": (lambda v: _is_int(v) and v > 0, "a positive integer", True),
    },
    "simulation": {
        "n_paths": (_is_int, "an integer", True),
        "horizon": (_is_int, "an integer", True),
        "prior": (_num_list, "a list of numbers", True),
        "true_kernel_index": (_is_int, "an integer", True),
        "seed": (lambda v: _is_int(v) and 0 <= v < 2**64, "an unsigned 64-bit integer", False),
        "initial_wealth": (_wealth_spec, "null, a positive number, {\"uniform\": [lo, hi]} "
                                         "or {\"threshold_multiple\": k}", False),
        "initial_state": (lambda v: v == "stationary" or _is_int(v), "\"stationary\" or a state index",
                          False),
        "rao_blackwell": (lambda v: isinstance(v, bool), "a boolean", False),
        "belief_mode": (lambda v: v in ("exact", "project"), "\"exact\" or \"project\"", False),
        "shock_draws": (lambda v: v in ("continuous", "atoms"), "\"continuous\" or \"atoms\"", False),
    },
    "output": {
        "dir": (lambda v: isinstance(v, str) and v != "", "a non-empty string", False),
    },
}


def validate_document(doc) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object", "$")
    for block in doc:
        if block not in SCHEMA:
            raise ConfigError(f"unknown block {block!r}", block)
    for block, keys in SCHEMA.items():
        if block not in doc:
            if any(req for _, _, req in keys.values()):
                raise ConfigError("required block is missing", block)
            continue
        body = doc[block]
        if not isinstance(body, dict):
            raise ConfigError("block must be an object", block)
        for k in body:
            if k not in keys:
                raise ConfigError(f"unknown key {k!r}", f"{block}.{k}")
        for k, (ok, what, required) in keys.items():
            if k not in body:
                if required:
                    raise ConfigError("required key is missing", f"{block}.{k}")
                continue
            if not ok(body[k]):
                raise ConfigError(f"must be {what}, got {body[k]!r}", f"{block}.{k}")


# ------------------------------------------------------------------ RunConfig

@dataclass(frozen=True)
class GridConfig:
    G: int
    s_max: float
    s_median: float
    H: int
    quadrature_R: int
    quadrature_Y: int


@dataclass(frozen=True)
class SolverConfig:
    tol: float
    max_iter: int


@dataclass(frozen=True)
class RunConfig:
    model: CalibratedHouseholdModel
    candidates: CandidateSet
    p_star: np.ndarray | None
    grids: GridConfig
    solver: SolverConfig
    simulation: SimulationConfig
    output_dir: str
    document: dict = field(repr=False, compare=False)

    @property
    def hash(self) -> str:
        return stable_hash(self.document)

    @property
    def economy_id(self) -> str:
        """Hash of everything that defines the economy except the candidate set and grids."""
        return stable_hash({"model": self.document["model"],
                            "state_order": list(self.candidates.state_order),
                            "quadrature": [self.grids.quadrature_R, self.grids.quadrature_Y]})

    @cached_property
    def shocks(self) -> StateShockMap:
        return discretize_model(self.model, gauss_hermite_normal(self.grids.quadrature_R),
                                gauss_hermite_normal(self.grids.quadrature_Y))

    def context(self, full_info: bool = False) -> SolverContext:
        """Solver context; ``full_info`` keeps only the true kernel (N=1, H=1)."""
        g = self.grids
        savings = build_savings_grid(g.G, g.s_max, g.s_median)
        if full_info:
            cands = self.candidates.subset([self.simulation.true_kernel_index])
            return build_context(self.model.utility, cands, self.shocks, savings, 1, self.economy_id)
        return build_context(self.model.utility, self.candidates, self.shocks, savings, g.H,
                             self.economy_id)

    def with_seed(self, seed: int) -> "RunConfig":
        doc = merge(self.document, {"simulation": {"seed": int(seed)}})
        return config_from_document(doc)


def _build(path: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except DomainError as exc:
        raise ConfigError(str(exc), exc.path or path) from exc
    except ConfigError as exc:
        raise ConfigError(str(exc), exc.path or path) from exc


def config_from_document(doc: dict) -> RunConfig:
    """Validate a document against the schema and every module invariant."""
    validate_document(doc)
    doc = copy.deepcopy(doc)
    cb = doc["candidates"]
    for i, mat in enumerate(cb["matrices"]):
        _build(f"candidates.matrices[{i}]", check_stochastic, mat, f"candidates.matrices[{i}]")
    order = cb.get("state_order") or list(range(len(cb["matrices"][0])))
    cands = _build("candidates", CandidateSet, cb["matrices"], order)
    model = _build("model", CalibratedHouseholdModel, state_order=order, **doc["model"])
    if model.n_states != cands.n_states:
        raise ConfigError(f"model has {model.n_states} states, candidates have {cands.n_states}",
                          "candidates.matrices")
    p_star = cb.get("p_star")
    if p_star is not None:
        p_star = _build("candidates.p_star", check_stochastic, p_star, "candidates.p_star")
        if p_star.shape[0] != cands.n_states:
            raise ConfigError("p_star has the wrong size", "candidates.p_star")
    grids = GridConfig(**doc["grids"])
    _build("grids", build_savings_grid, grids.G, grids.s_max, grids.s_median)
    if grids.H < 1:
        raise ConfigError("resolution must be at least 1", "grids.H")
    for k in ("quadrature_R", "quadrature_Y"):
        _build(f"grids.{k}", gauss_hermite_normal, getattr(grids, k))
    solver = SolverConfig(float(doc["solver"]["tol"]), int(doc["solver"]["max_iter"]))
    sb = dict(doc["simulation"])
    sim = _build("simulation", SimulationConfig, **sb)
    if len(sim.prior) != cands.n_candidates:
        raise ConfigError(f"prior has {len(sim.prior)} weights for {cands.n_candidates} candidates",
                          "simulation.prior")
    if not 0 <= sim.true_kernel_index < cands.n_candidates:
        raise ConfigError("index out of range", "simulation.true_kernel_index")
    if isinstance(sim.initial_state, int) and not 0 <= sim.initial_state < cands.n_states:
        raise ConfigError("index out of range", "simulation.initial_state")
    out = doc.get("output", {}).get("dir", "out")
    return RunConfig(model, cands, p_star, grids, solver, sim, out, doc)


def load_config(path=None, preset: str | None = None, reduced: bool = False) -> RunConfig:
    """Resolve a config from a file, a preset, or a preset overridden by a file."""
    if path is None and preset is None:
        raise ConfigError("give a config file or a preset")
    doc = preset_document(preset) if preset else {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found", str(p))
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"parse error: {exc.msg}", f"{p}:{exc.lineno}:{exc.colno}") from exc
        if not isinstance(user, dict):
            raise ConfigError("top level must be an object", "$")
        doc = merge(doc, user) if preset else user
    if reduced:
        doc = reduce_document(doc)
    return config_from_document(doc)


def dump_document(cfg: RunConfig) -> str:
    return json.dumps(cfg.document, indent=2, sort_keys=True) + "\n"
