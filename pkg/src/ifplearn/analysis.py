"""Post-solve diagnostics: Euler residuals, thresholds, asymptotic MPCs,
structural checks on converged tables, and a value-iteration oracle.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericalError, ResourceError
from .model import StateShockMap
from .solver import PolicyTable, SolverContext, euler_rhs

SLACK_MONOTONE = 1e-10
SLACK_CONCAVE = 1e-8
SLACK_SLOPE = 1e-10
SLACK_THRESHOLD = 1e-10
SLACK_LOWER_BOUND = 1e-8
RESIDUAL_BOUND = 1e-3


class TabulatedPolicy:
    """Consumption tabulated on a common wealth grid, shape (M, L, n).

    Linear between nodes, proportional (c/w held at the first node's ratio)
    below the first node, linearly extrapolated above the last, capped at w.
    """

    def __init__(self, wealth: np.ndarray, consumption: np.ndarray, beliefs=None):
        self.wealth = np.asarray(wealth, dtype=float)
        self.consumption = np.asarray(consumption, dtype=float)
        self.beliefs = beliefs

    def evaluate_many(self, w, z, ell) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        cs = self.consumption[z, ell]
        x = self.wealth
        c = np.interp(w, x, cs)
        lo = w < x[0]
        c = np.where(lo, w * cs[0] / x[0], c)
        hi = w > x[-1]
        slope = (cs[-1] - cs[-2]) / (x[-1] - x[-2])
        c = np.where(hi, cs[-1] + slope * (w - x[-1]), c)
        return np.minimum(c, w)

    def evaluate(self, w, z, ell) -> float:
        return float(self.evaluate_many(np.array([w]), z, ell)[0])


def _rhs_many(policy, ctx: SolverContext, s: np.ndarray, z: int, ell: int) -> np.ndarray:
    """Vectorized Euler right-hand side at grid belief ell for savings levels s."""
    s = np.asarray(s, dtype=float)
    sh = ctx.shocks
    u = ctx.utility
    total = np.zeros(s.shape)
    for zh in range(ctx.n_states):
        p = ctx.ptheta[ell, z, zh]
        if p == 0.0:
            continue
        l2 = int(ctx.next_index[z, zh, ell])
        wn = sh.R[zh][None, :] * s[:, None] + sh.Y[zh][None, :]
        c = policy.evaluate_many(wn, zh, l2)
        total += p * np.sum(ctx.atom_weight[zh][None, :] * u.marginal(c), axis=1)
    return total


def binding_threshold(p, ctx: SolverContext, z: int, ell: int) -> float:
    """(u')^{-1}[min{E beta R u'(c(Y, zh, theta')), u'(0)}]: below it the agent consumes all wealth."""
    if isinstance(p, PolicyTable):
        rhs = euler_rhs(p, 0.0, z, ctx.beliefs.points[ell], ctx)
    else:
        rhs = float(_rhs_many(p, ctx, np.array([0.0]), z, ell)[0])
    rhs = min(rhs, ctx.utility.marginal_at_zero)
    return float(ctx.utility.inverse_marginal(rhs))


@dataclass
class ResidualStats:
    max_abs: float
    mean_abs: float
    n_interior: int
    per_cell_max: np.ndarray
    residuals: np.ndarray = field(repr=False)
    interior: np.ndarray = field(repr=False)


def euler_residuals(p, ctx: SolverContext, probe_wealths, cells=None, continuation=None) -> ResidualStats:
    """Relative Euler errors 1 - (u')^{-1}(clamped RHS)/c at each probe and (z, l).

    The clamp min{max{RHS, u'(w)}, u'(0)} makes a constrained probe (c = w)
    exact, so only probes above the binding threshold count as interior.
    ``continuation`` is the policy used next period (default: ``p`` itself).
    """
    nxt = p if continuation is None else continuation
    w = np.asarray(probe_wealths, dtype=float)
    u = ctx.utility
    M, L = ctx.n_states, ctx.n_beliefs
    res = np.zeros((M, L, w.size))
    interior = np.zeros((M, L, w.size), dtype=bool)
    cells = cells if cells is not None else [(z, l) for z in range(M) for l in range(L)]
    for z, l in cells:
        c = p.evaluate_many(w, z, l)
        rhs = _rhs_many(nxt, ctx, w - c, z, l)
        m = np.minimum(np.maximum(rhs, u.marginal(w)), u.marginal_at_zero)
        res[z, l] = 1.0 - u.inverse_marginal(m) / c
        thr = binding_threshold(nxt, ctx, z, l)
        interior[z, l] = w > thr * (1 + 1e-9)
    a = np.abs(res)
    sel = a[interior]
    per_cell = np.where(interior, a, 0.0).max(axis=2)
    return ResidualStats(float(sel.max()) if sel.size else 0.0,
                         float(sel.mean()) if sel.size else 0.0,
                         int(sel.size), per_cell, res, interior)


def residual_floor(stats: ResidualStats, probes, bound: float = RESIDUAL_BOUND) -> float:
    """Smallest probe wealth above which every interior residual is below ``bound``."""
    probes = np.asarray(probes, dtype=float)
    bad = (np.abs(stats.residuals) >= bound) & stats.interior
    hit = np.nonzero(bad.any(axis=(0, 1)))[0]
    if hit.size == 0:
        return float(probes[0])
    if hit[-1] + 1 >= probes.size:
        return math.inf
    return float(probes[hit[-1] + 1])


def default_probes(p: PolicyTable, n: int = 400, w_max: float | None = None) -> np.ndarray:
    """Log-spaced probes from just above the smallest threshold up to w_max.

    Defaults to the largest first-segment-free range covered by every table row.
    """
    lo = float(np.min(p.knots[:, :, 0]))
    hi = w_max if w_max is not None else float(np.min(p.knots[:, :, -1]))
    return np.geomspace(lo * 1.001, hi, n)


def asymptotic_mpc(p: PolicyTable, z: int, ell: int) -> tuple[float, float]:
    """(top-decile secant slope, last-segment slope) of consumption in wealth."""
    k = p.knots[z, ell]
    c = p.consumption[z, ell]
    G = k.size
    if G < 10:
        raise ValueError("asymptotic MPC needs at least 10 knots")
    i = int(math.floor(0.9 * (G - 1)))
    top = (c[-1] - c[i]) / (k[-1] - k[i])
    seg = (c[-1] - c[-2]) / (k[-1] - k[-2])
    return float(top), float(seg)


def secant_slopes(p: PolicyTable) -> np.ndarray:
    return np.diff(p.consumption, axis=2) / np.diff(p.knots, axis=2)


def compare_policies(a, b, u, probes, cells) -> tuple[float, float]:
    """Sup gaps between two policies over probes: consumption units and marginal utility."""
    probes = np.asarray(probes, dtype=float)
    gap_c = gap_m = 0.0
    for z, l in cells:
        ca = a.evaluate_many(probes, z, l)
        cb = b.evaluate_many(probes, z, l)
        gap_c = max(gap_c, float(np.max(np.abs(ca - cb))))
        gap_m = max(gap_m, float(np.max(np.abs(u.marginal(ca) - u.marginal(cb)))))
    return gap_c, gap_m


# ------------------------------------------------------------------ oracle

@dataclass
class OracleResult:
    policy: TabulatedPolicy
    value: np.ndarray
    consumption_step: np.ndarray
    iterations: int
    deltas: list


def _interp_linear(x: np.ndarray, xp: np.ndarray, fp: np.ndarray) -> np.ndarray:
    y = np.interp(x, xp, fp)
    lo_slope = (fp[1] - fp[0]) / (xp[1] - xp[0])
    hi_slope = (fp[-1] - fp[-2]) / (xp[-1] - xp[-2])
    y = np.where(x < xp[0], fp[0] + lo_slope * (x - xp[0]), y)
    return np.where(x > xp[-1], fp[-1] + hi_slope * (x - xp[-1]), y)


def brute_force_policy(ctx: SolverContext, wealth_grid, n_consumption: int, tol: float = 1e-10,
                       max_iter: int = 100_000) -> OracleResult:
    """Value iteration on a wealth grid with consumption chosen from {w k/n : k = 1..n}.

    V is linear in wealth between nodes (linearly extended outside). Does not
    touch the EGM code path; only the model primitives and the belief
    transition indices are shared.
    """
    W = np.asarray(wealth_grid, dtype=float)
    M, L = ctx.n_states, ctx.n_beliefs
    if W.size * M * L > 10**6:
        raise ResourceError("oracle state space exceeds 10^6 nodes")
    u = ctx.utility
    sh: StateShockMap = ctx.shocks
    frac = np.arange(1, n_consumption + 1) / n_consumption
    C = W[:, None] * frac[None, :]
    S = W[:, None] - C
    U = u.utility(C)
    Wn = [sh.R[zh][None, None, :] * S[:, :, None] + sh.Y[zh][None, None, :] for zh in range(M)]
    pb = sh.prob * sh.beta
    V = np.broadcast_to(u.utility(W), (M, L, W.size)).copy()
    deltas = []
    for it in range(1, max_iter + 1):
        EV = {}
        for zh in range(M):
            for l2 in np.unique(ctx.next_index[:, zh, :]):
                vals = _interp_linear(Wn[zh], W, V[zh, l2])
                EV[zh, int(l2)] = np.sum(vals * pb[zh][None, None, :], axis=2)
        Vnew = np.empty_like(V)
        arg = np.empty((M, L, W.size), dtype=np.int64)
        for z in range(M):
            for l in range(L):
                cont = np.zeros_like(U)
                for zh in range(M):
                    pr = ctx.ptheta[l, z, zh]
                    if pr > 0:
                        cont += pr * EV[zh, int(ctx.next_index[z, zh, l])]
                tot = U + cont
                arg[z, l] = np.argmax(tot, axis=1)
                Vnew[z, l] = np.take_along_axis(tot, arg[z, l][:, None], axis=1)[:, 0]
        d = float(np.max(np.abs(Vnew - V)))
        deltas.append(d)
        V = Vnew
        if d < tol:
            break
    else:
        raise NumericalError(f"value iteration did not converge in {max_iter} iterations")
    cons = C[np.arange(W.size)[None, None, :], arg]
    policy = TabulatedPolicy(W, cons, ctx.beliefs)
    return OracleResult(policy, V, W / n_consumption, len(deltas), deltas)


# -------------------------------------------------------- certification

@dataclass
class PolicyDiagnostics:
    threshold: np.ndarray
    threshold_formula: np.ndarray
    mpc_top_decile: np.ndarray
    mpc_top_segment: np.ndarray
    max_residual: np.ndarray
    monotone: np.ndarray
    concave: np.ndarray
    checks: dict
    details: dict

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def format_report(self) -> str:
        lines = ["structural checks:"]
        for name, ok in self.checks.items():
            extra = self.details.get(name)
            lines.append(f"  {name:<24} {'pass' if ok else 'FAIL'}" + (f"  ({extra})" if extra else ""))
        lines.append(f"all passed: {'yes' if self.passed else 'no'}")
        return "\n".join(lines)

    def write_csv(self, path, beliefs, comment: str = "") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        M, L = self.threshold.shape
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["z", "ell"] + [f"theta_{i + 1}" for i in range(beliefs.n_candidates)]
                        + ["binding_threshold", "threshold_formula", "mpc_top_decile", "mpc_top_segment",
                           "max_euler_residual", "monotone", "concave"])
            for z in range(M):
                for l in range(L):
                    wr.writerow([z, l, *(repr(float(v)) for v in beliefs.points[l]),
                                 repr(float(self.threshold[z, l])), repr(float(self.threshold_formula[z, l])),
                                 repr(self.mpc_top_decile[z, l]), repr(self.mpc_top_segment[z, l]),
                                 repr(float(self.max_residual[z, l])),
                                 int(self.monotone[z, l]), int(self.concave[z, l])])


def diagnose(p: PolicyTable, ctx: SolverContext, s_bar: float | None = None, probes=None,
             n_probe_monotone: int = 1000) -> PolicyDiagnostics:
    """Run every structural check on a converged table."""
    M, L, G = p.shape
    k, c = p.knots, p.consumption
    dc = np.diff(c, axis=2)
    dsav = np.diff(k - c, axis=2)
    slopes = secant_slopes(p)
    mono_c = np.all(dc >= -SLACK_MONOTONE, axis=2)
    mono_s = np.all(dsav >= -SLACK_MONOTONE, axis=2)
    concave = np.all(np.diff(slopes, axis=2) <= SLACK_CONCAVE, axis=2)
    slope_ok = bool(np.all(slopes >= -SLACK_SLOPE) and np.all(slopes <= 1 + SLACK_SLOPE))

    thr = k[:, :, 0].copy()
    formula = np.array([[binding_threshold(p, ctx, z, l) for l in range(L)] for z in range(M)])
    thr_gap = float(np.max(np.abs(formula - thr)))

    probe_mono = True
    binding_ok = True
    for z in range(M):
        for l in range(L):
            grid = np.linspace(k[z, l, 0] * 1e-3, k[z, l, -1] * 1.2, n_probe_monotone)
            vals = p.evaluate_many(grid, z, l)
            probe_mono &= bool(np.all(np.diff(vals) >= -SLACK_MONOTONE))
            below = grid <= thr[z, l]
            binding_ok &= bool(np.all(vals[below] == grid[below]) and np.all(vals[~below] < grid[~below]))

    mpc_top = np.zeros((M, L))
    mpc_seg = np.zeros((M, L))
    for z in range(M):
        for l in range(L):
            mpc_top[z, l], mpc_seg[z, l] = asymptotic_mpc(p, z, l)

    probes = default_probes(p) if probes is None else probes
    resid = euler_residuals(p, ctx, probes)

    checks = {
        "wealth_monotone": bool(np.all(mono_c)) and probe_mono,
        "savings_monotone": bool(np.all(mono_s)),
        "concave": bool(np.all(concave)),
        "slope_in_unit_interval": slope_ok,
        "binding_region": binding_ok,
        "threshold_formula": thr_gap <= SLACK_THRESHOLD,
        "euler_residual": resid.max_abs < RESIDUAL_BOUND,
    }
    w_ok = residual_floor(resid, probes)
    details = {
        "threshold_formula": f"max gap {thr_gap:.3e}",
        "euler_residual": f"max {resid.max_abs:.3e}, mean {resid.mean_abs:.3e} over {resid.n_interior} probes; "
                          f"below {RESIDUAL_BOUND:g} for w >= {w_ok:.4g}",
        "concave": f"max slope increase {float(np.max(np.diff(slopes, axis=2))):.3e}",
    }
    if s_bar is not None:
        lb_gap = float(np.min(c - (1.0 - s_bar) * k))
        checks["consumption_lower_bound"] = lb_gap >= -SLACK_LOWER_BOUND
        details["consumption_lower_bound"] = f"s_bar={s_bar:.10g}, min c-(1-s_bar)w = {lb_gap:.3e}"
    return PolicyDiagnostics(thr, formula, mpc_top, mpc_seg, resid.per_cell_max,
                             mono_c & mono_s, concave, checks, details)


def income_scaling_check(p: PolicyTable, ctx: SolverContext, factor: float = 1.1, probes=None,
                         tol: float = 1e-4, max_iter: int = 50_000):
    """Solve with income scaled by ``factor`` and return (min c_scaled - c_base, scaled table).

    A nonnegative result (up to slack) means consumption rose weakly at every
    probe and every (z, l).
    """
    from .solver import solve

    scaled = SolverContext(ctx.utility, ctx.candidates, scale_income(ctx.shocks, factor), ctx.savings,
                           ctx.beliefs, ctx.economy_id + f"*income{factor!r}")
    q, _ = solve(scaled, tol=tol, max_iter=max_iter, initial=p, log_every=0)
    probes = default_probes(p) if probes is None else np.asarray(probes, dtype=float)
    worst = math.inf
    for z in range(ctx.n_states):
        for l in range(ctx.n_beliefs):
            d = q.evaluate_many(probes, z, l) - p.evaluate_many(probes, z, l)
            worst = min(worst, float(np.min(d)))
    return worst, q


def scale_income(shocks: StateShockMap, factor: float) -> StateShockMap:
    return StateShockMap(shocks.prob, shocks.beta, shocks.R, shocks.Y * factor,
                         gamma=shocks.gamma, meta=dict(shocks.meta))
