"""Endogenous grid time iteration with a belief state.

A policy is stored per (state z, belief grid index l) as wealth knots and the
consumption at each knot; between knots it is linear, below the first knot it
consumes all wealth, and above the last knot it extends the final segment.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _kernels
from .belief import (SimplexGrid, bayes_update, build_simplex_grid, mixture_kernel, mixture_kernels,
                     project_batch, project_to_grid)
from .errors import CertificationError, ConfigError, ConvergenceError, DomainError, NumericalError
from .model import CandidateSet, CrraUtility, StateShockMap, stable_hash

log = logging.getLogger(__name__)

__version__ = "0.1.0"


@dataclass(frozen=True)
class SavingsGrid:
    points: np.ndarray

    def __post_init__(self):
        s = np.array(self.points, dtype=float)
        if s.ndim != 1 or s.size < 2:
            raise DomainError("savings grid needs at least two points")
        if s[0] != 0.0 or not np.all(np.diff(s) > 0) or not np.all(np.isfinite(s)):
            raise DomainError("savings grid must start at 0 and increase strictly")
        s.setflags(write=False)
        object.__setattr__(self, "points", s)

    def __len__(self):
        return self.points.size


def build_savings_grid(G: int, s_max: float, s_median: float) -> SavingsGrid:
    """Exponentially spaced grid on [0, s_max] whose midpoint (u = 1/2) is s_median.

    s_g = s_max * (exp(lam*u_g) - 1) / (exp(lam) - 1) with u_g = g/(G-1) and
    lam = 2*log(s_max/s_median - 1).
    """
    if G < 2:
        raise DomainError("savings grid needs G >= 2")
    if not 0 < s_median < s_max:
        raise DomainError("need 0 < s_median < s_max")
    ratio = s_max / s_median - 1.0
    if ratio <= 1.0:
        raise DomainError(f"s_median={s_median} >= s_max/2 cannot be produced by an exponential "
                          "warp; use a linear grid")
    lam = 2.0 * math.log(ratio)
    u = np.arange(G) / (G - 1)
    s = s_max * np.expm1(lam * u) / math.expm1(lam)
    s[0] = 0.0
    s[-1] = s_max
    if G % 2 == 1:
        s[G // 2] = s_median
    return SavingsGrid(s)


@dataclass(frozen=True)
class SolverContext:
    """Everything a sweep needs; derived arrays are computed once and cached."""

    utility: CrraUtility
    candidates: CandidateSet
    shocks: StateShockMap
    savings: SavingsGrid
    beliefs: SimplexGrid
    economy_id: str = ""

    def __post_init__(self):
        if self.candidates.n_states != self.shocks.n_states:
            raise ConfigError("candidate matrices and shock map disagree on the number of states")
        if self.beliefs.n_candidates != self.candidates.n_candidates:
            raise ConfigError("belief grid and candidate set disagree on N")

    @property
    def n_states(self) -> int:
        return self.candidates.n_states

    @property
    def n_beliefs(self) -> int:
        return self.beliefs.count

    @cached_property
    def ptheta(self) -> np.ndarray:
        return mixture_kernels(self.candidates, self.beliefs.points)

    @cached_property
    def next_index(self) -> np.ndarray:
        """nxt[z, zh, l]: grid index of the projected posterior after z -> zh."""
        M, L = self.n_states, self.n_beliefs
        nxt = np.empty((M, M, L), dtype=np.int64)
        for z in range(M):
            for zh in range(M):
                lik = self.candidates.matrices[:, z, zh]
                num = self.beliefs.points * lik[None, :]
                den = num.sum(axis=1)
                ok = den > 0
                post = np.where(ok[:, None], num / np.where(ok, den, 1.0)[:, None], self.beliefs.points)
                # unreachable transitions carry zero weight; index is never read
                nxt[z, zh] = np.where(ok, project_batch(self.beliefs, post), np.arange(L))
        return nxt

    @cached_property
    def wnext(self) -> np.ndarray:
        # (M, A, G): next wealth per next state, atom, savings level
        R = self.shocks.R[:, :, None]
        Y = self.shocks.Y[:, :, None]
        return np.ascontiguousarray(R * self.savings.points[None, None, :] + Y)

    @cached_property
    def atom_weight(self) -> np.ndarray:
        return np.ascontiguousarray(self.shocks.prob * self.shocks.beta * self.shocks.R)

    @cached_property
    def reachable(self) -> np.ndarray:
        need = np.zeros((self.n_states, self.n_beliefs), dtype=np.bool_)
        for z in range(self.n_states):
            for zh in range(self.n_states):
                pos = self.ptheta[:, z, zh] > 0
                need[zh, self.next_index[z, zh][pos]] = True
        return need

    def policy_hash(self) -> str:
        return stable_hash({
            "economy": self.economy_id or self.shocks.digest(),
            "gamma": self.utility.gamma,
            "candidates": self.candidates.matrices,
            "savings": self.savings.points,
            "H": self.beliefs.resolution,
        })


@dataclass(frozen=True)
class PolicyTable:
    knots: np.ndarray
    consumption: np.ndarray
    savings: SavingsGrid
    beliefs: SimplexGrid
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        k = np.ascontiguousarray(self.knots, dtype=float)
        c = np.ascontiguousarray(self.consumption, dtype=float)
        if k.shape != c.shape or k.ndim != 3:
            raise DomainError("knots and consumption must share shape (M, L, G)")
        if k.shape[1] != self.beliefs.count or k.shape[2] != len(self.savings):
            raise DomainError("policy table shape disagrees with its grids")
        k.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "consumption", c)

    @property
    def shape(self):
        return self.knots.shape

    @classmethod
    def identity(cls, ctx: SolverContext) -> "PolicyTable":
        """c(w) = w, stored on knots equal to the savings grid."""
        s = np.broadcast_to(ctx.savings.points, (ctx.n_states, ctx.n_beliefs, len(ctx.savings)))
        return cls(s.copy(), s.copy(), ctx.savings, ctx.beliefs, {"initial": "identity"})

    def evaluate(self, w: float, z: int, ell: int) -> float:
        if not w > 0:
            raise DomainError(f"policy evaluation needs w > 0, got {w!r}")
        out, clamped = _kernels.evaluate_many(self.knots, self.consumption, z, ell, np.array([w]))
        if clamped[0]:
            warnings.warn("extrapolated consumption exceeded wealth and was clamped", stacklevel=2)
        return float(out[0])

    def evaluate_many(self, w, z, ell) -> np.ndarray:
        out, clamped = _kernels.evaluate_many(self.knots, self.consumption, z, ell, w)
        if clamped.any():
            warnings.warn(f"extrapolated consumption clamped to wealth at {int(clamped.sum())} points",
                          stacklevel=2)
        return out

    def validate(self, tol: float = 1e-12) -> None:
        """Raise NumericalError if an EGM table breaks its structural invariants."""
        k, c, s = self.knots, self.consumption, self.savings.points
        if not np.all(np.diff(k, axis=2) > 0):
            raise NumericalError("wealth knots are not strictly increasing")
        if not (np.all(c > 0) and np.all(c <= k)):
            raise NumericalError("knot consumption outside (0, w]")
        if not np.all(np.diff(c, axis=2) >= 0):
            raise NumericalError("knot consumption decreases along the savings grid")
        gap = np.abs(k - c - s[None, None, :])
        if np.any(gap > tol * np.maximum(1.0, k)):
            raise NumericalError("wealth knot != savings + consumption")


@dataclass
class ConvergenceReport:
    iterations: int
    final_delta: float
    rho_delta: float
    converged: bool
    wall_time: float
    tolerance: float
    delta_history: list = field(default_factory=list, repr=False)
    rho_history: list = field(default_factory=list, repr=False)

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "iterations": self.iterations,
            "final_delta": self.final_delta,
            "rho_delta": self.rho_delta,
            "converged": self.converged,
            "tolerance": self.tolerance,
        }
        if timing:
            d["wall_time"] = self.wall_time
        return d


def build_context(utility: CrraUtility, candidates: CandidateSet, shocks: StateShockMap,
                  savings: SavingsGrid, H: int, economy_id: str = "") -> SolverContext:
    return SolverContext(utility, candidates, shocks, savings,
                         build_simplex_grid(candidates.n_candidates, H), economy_id)


def expected_marginal_table(prev: PolicyTable, ctx: SolverContext) -> np.ndarray:
    """Q[zh, l, g] = E_zh[beta R u'(c(R s_g + Y, zh, l))]."""
    M, L, G = prev.shape
    Q = np.empty((M, L, G))
    _kernels.expected_marginal(prev.knots, prev.consumption, ctx.wnext, ctx.atom_weight,
                               ctx.utility.gamma, ctx.reachable, Q)
    return Q


def euler_rhs_table(prev: PolicyTable, ctx: SolverContext) -> np.ndarray:
    Q = expected_marginal_table(prev, ctx)
    out = np.empty(prev.shape)
    _kernels.euler_rhs_table(Q, ctx.ptheta, ctx.next_index, out)
    return out


def euler_rhs(prev: PolicyTable, s: float, z: int, theta, ctx: SolverContext) -> float:
    """Expected discounted marginal value of saving s in state z under belief theta.

    The posterior and its grid projection depend only on (z, zh), so they are
    computed once per next state rather than per shock atom.
    """
    if s < 0:
        raise DomainError("savings must be nonnegative")
    w_theta = np.asarray(getattr(theta, "weights", theta), dtype=float)
    P = mixture_kernel(ctx.candidates, w_theta)
    total = 0.0
    for zh in range(ctx.n_states):
        p = P[z, zh]
        if p == 0.0:
            continue
        ell = project_to_grid(prev.beliefs, bayes_update(ctx.candidates, w_theta, z, zh))
        wn = np.ascontiguousarray(ctx.shocks.R[zh] * s + ctx.shocks.Y[zh])
        q = _kernels.atom_sum(prev.knots, prev.consumption, zh, ell, wn,
                              ctx.atom_weight[zh], ctx.utility.gamma)
        total += p * q
    return float(total)


def egm_step(prev: PolicyTable, ctx: SolverContext) -> PolicyTable:
    rhs = euler_rhs_table(prev, ctx)
    # min{rhs, u'(0)} is vacuous: CRRA has u'(0) = inf
    if math.isfinite(ctx.utility.marginal_at_zero):
        rhs = np.minimum(rhs, ctx.utility.marginal_at_zero)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        c = ctx.utility.inverse_marginal(rhs)
    bad = ~np.isfinite(c) | (c <= 0)
    if bad.any():
        z, ell, g = (int(v) for v in np.argwhere(bad)[0])
        raise NumericalError(f"non-finite consumption at g={g}, z={z}, ell={ell}")
    knots = ctx.savings.points[None, None, :] + c
    return PolicyTable(knots, c, ctx.savings, ctx.beliefs)


def solve(ctx: SolverContext, tol: float = 1e-4, max_iter: int = 50_000,
          initial: PolicyTable | None = None, certificate=None,
          log_every: int = 500) -> tuple[PolicyTable, ConvergenceReport]:
    """Iterate EGM sweeps until max |c_t - c_{t-1}| < tol at fixed (g, z, l).

    Warns when no stability certificate can be produced for the context.
    """
    _kernels.configure_threads()
    if certificate is None:
        from .stability import certify
        try:
            certify(ctx.candidates, ctx.shocks, ctx.candidates.state_order)
        except CertificationError as exc:
            warnings.warn(f"stability not certified: {exc}", stacklevel=2)
    elif not getattr(certificate, "certified", True):
        warnings.warn("stability certificate supplied but not certified", stacklevel=2)

    table = initial if initial is not None else PolicyTable.identity(ctx)
    u = ctx.utility
    deltas, rhos = [], []
    t0 = time.perf_counter()
    for it in range(1, max_iter + 1):
        new = egm_step(table, ctx)
        delta = float(np.max(np.abs(new.consumption - table.consumption)))
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = float(np.max(np.abs(u.marginal(new.consumption) - u.marginal(table.consumption))))
        deltas.append(delta)
        rhos.append(rho)
        table = new
        if log_every and it % log_every == 0:
            log.info("iteration %d: delta=%.3e rho=%.3e", it, delta, rho)
        if delta < tol:
            break
    else:
        raise ConvergenceError(f"no convergence after {max_iter} iterations "
                               f"(last delta {deltas[-1]:.3e})", deltas)
    table.validate()
    report = ConvergenceReport(len(deltas), deltas[-1], rhos[-1], True,
                               time.perf_counter() - t0, tol, deltas, rhos)
    meta = {"policy_hash": ctx.policy_hash(), "economy_id": ctx.economy_id,
            "convergence": report.to_dict(timing=False)}
    table = PolicyTable(table.knots, table.consumption, table.savings, table.beliefs, meta)
    return table, report


def iterate(ctx: SolverContext, n: int, initial: PolicyTable | None = None) -> PolicyTable:
    """Exactly n sweeps from ``initial`` (identity by default), no stopping rule."""
    table = initial if initial is not None else PolicyTable.identity(ctx)
    for _ in range(n):
        table = egm_step(table, ctx)
    return table


# ---------------------------------------------------------------- persistence

def _fmt(x: float) -> str:
    return repr(float(x))


def save_policy(p: PolicyTable, path, extra: dict | None = None,
                comment: str = "") -> tuple[Path, Path]:
    """Write ``path`` (CSV) and ``path.json`` (sidecar); floats use shortest repr.

    ``comment`` becomes a leading ``#`` line of the CSV.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    M, L, G = p.shape
    N = p.beliefs.n_candidates
    s = p.savings.points
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["z", "ell"] + [f"theta_{i + 1}" for i in range(N)] + ["s", "wealth_knot", "consumption"])
        for z in range(M):
            for ell in range(L):
                th = [_fmt(v) for v in p.beliefs.points[ell]]
                for g in range(G):
                    wr.writerow([z, ell, *th, _fmt(s[g]), _fmt(p.knots[z, ell, g]),
                                 _fmt(p.consumption[z, ell, g])])
    sidecar = {
        "tool_version": __version__,
        "shape": [M, L, G],
        "n_candidates": N,
        "resolution": p.beliefs.resolution,
        "savings_grid": [float(v) for v in s],
        **p.meta,
        **(extra or {}),
    }
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path, side


def load_policy(path) -> PolicyTable:
    path = Path(path)
    side = path.with_name(path.name + ".json")
    if not path.exists() or not side.exists():
        raise ConfigError(f"policy artifact {path} (and sidecar) not found")
    meta = json.loads(side.read_text())
    M, L, G = meta["shape"]
    savings = SavingsGrid(np.array(meta["savings_grid"], dtype=float))
    beliefs = build_simplex_grid(int(meta["n_candidates"]), int(meta["resolution"]))
    knots = np.empty((M, L, G))
    cons = np.empty((M, L, G))
    with open(path, newline="") as fh:
        rd = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(rd)
        iw, ic = header.index("wealth_knot"), header.index("consumption")
        count = 0
        for row in rd:
            z, ell = int(row[0]), int(row[1])
            g = count % G
            knots[z, ell, g] = float(row[iw])
            cons[z, ell, g] = float(row[ic])
            count += 1
    if count != M * L * G:
        raise ConfigError(f"policy CSV has {count} rows, expected {M * L * G}")
    keep = {k: v for k, v in meta.items() if k not in ("shape", "savings_grid", "n_candidates", "resolution")}
    return PolicyTable(knots, cons, savings, beliefs, keep)
