"""Monte Carlo panels of households following a solved policy.

Every path draws from its own stream seeded by ``(seed, path_index)``, so a
path's draws do not depend on the panel size, the chunking, or the number of
worker threads, and two economies simulated with the same seed face the same
state and shock histories (common random numbers).
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._kernels import THREADS_ENV
from .belief import bayes_update_batch, mixture_kernels, project_batch
from .errors import ConfigError, DomainError, LearningError, NumericalError
from .model import CalibratedHouseholdModel
from .solver import PolicyTable, SolverContext
from .stability import check_irreducible

VAR_GUARD = 1e-12


def stationary_distribution(P, tol: float = 1e-12, max_iter: int = 10**6) -> np.ndarray:
    """Unique pi with pi P = pi, by power iteration on the lazy chain (P + I)/2."""
    P = np.asarray(P, dtype=float)
    if not check_irreducible(P):
        raise DomainError("stationary distribution requested for a reducible matrix")
    M = P.shape[0]
    lazy = 0.5 * (P + np.eye(M))
    pi = np.full(M, 1.0 / M)
    for _ in range(max_iter):
        nxt = pi @ lazy
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - pi)) < tol:
            return nxt
        pi = nxt
    raise NumericalError("stationary distribution did not converge")


@dataclass(frozen=True)
class SimulationConfig:
    n_paths: int
    horizon: int
    prior: Sequence[float]
    true_kernel_index: int
    seed: int = 0
    initial_wealth: float | dict | None = None
    initial_state: int | str = "stationary"
    rao_blackwell: bool = False
    belief_mode: str = "exact"
    shock_draws: str = "continuous"
    transitions: str = "true"
    chunk_size: int = 2048

    def __post_init__(self):
        if self.n_paths < 1 or self.horizon < 1:
            raise ConfigError("need n_paths >= 1 and horizon >= 1")
        prior = tuple(float(v) for v in self.prior)
        if any(v < 0 for v in prior) or abs(sum(prior) - 1.0) > 1e-12:
            raise ConfigError(f"prior {prior} is not on the simplex", "simulation.prior")
        object.__setattr__(self, "prior", prior)
        if self.belief_mode not in ("exact", "project"):
            raise ConfigError("belief_mode must be 'exact' or 'project'")
        if self.shock_draws not in ("continuous", "atoms"):
            raise ConfigError("shock_draws must be 'continuous' or 'atoms'")
        if self.transitions not in ("true", "subjective"):
            raise ConfigError("transitions must be 'true' or 'subjective'")
        if not (self.initial_state == "stationary" or isinstance(self.initial_state, int)):
            raise ConfigError("initial_state must be 'stationary' or a state index")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


@dataclass
class PathStatistics:
    """Per-period cross-sectional moments, t = 0..T (T+1 rows)."""

    mean_c: np.ndarray
    se_c: np.ndarray
    mean_s: np.ndarray
    se_s: np.ndarray
    vol_c: np.ndarray
    mean_w: np.ndarray
    mean_theta: np.ndarray
    se_theta: np.ndarray
    state_freq: np.ndarray
    header: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.mean_c.size - 1

    def columns(self) -> dict:
        cols = {"t": np.arange(self.mean_c.size), "mean_c": self.mean_c, "se_c": self.se_c,
                "mean_s": self.mean_s, "se_s": self.se_s, "vol_c": self.vol_c}
        for i in range(self.mean_theta.shape[1]):
            cols[f"mean_theta_{i + 1}"] = self.mean_theta[:, i]
        for z in range(self.state_freq.shape[1]):
            cols[f"freq_z_{z + 1}"] = self.state_freq[:, z]
        return cols

    def write_csv(self, path, comment: str = "") -> Path:
        return _write_columns(path, self.columns(), self.header, comment)


@dataclass
class PairedStatistics:
    learning: PathStatistics
    benchmark: PathStatistics
    diff_c: np.ndarray
    se_diff_c: np.ndarray
    diff_s: np.ndarray
    se_diff_s: np.ndarray
    header: dict = field(default_factory=dict)

    def columns(self) -> dict:
        L, B = self.learning, self.benchmark
        cols = {"t": np.arange(L.mean_c.size),
                "mean_c_learning": L.mean_c, "mean_c_benchmark": B.mean_c,
                "diff_c": self.diff_c, "se_diff_c": self.se_diff_c,
                "mean_s_learning": L.mean_s, "mean_s_benchmark": B.mean_s,
                "diff_s": self.diff_s, "se_diff_s": self.se_diff_s,
                "vol_c_learning": L.vol_c, "vol_c_benchmark": B.vol_c,
                "diff_vol_c": L.vol_c - B.vol_c}
        for i in range(L.mean_theta.shape[1]):
            cols[f"mean_theta_{i + 1}"] = L.mean_theta[:, i]
        for z in range(L.state_freq.shape[1]):
            cols[f"freq_z_{z + 1}"] = L.state_freq[:, z]
        return cols

    def write_csv(self, path, comment: str = "") -> Path:
        return _write_columns(path, self.columns(), self.header, comment)


def _write_columns(path, cols: dict, header: dict, comment: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(cols)
    n = len(cols["t"])
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for k in sorted(header):
            fh.write(f"# {k}={header[k]}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(names)
        for i in range(n):
            wr.writerow([int(cols["t"][i])] + [repr(float(cols[k][i])) for k in names[1:]])
    return path


# ------------------------------------------------------------------ engine

@dataclass
class _Draws:
    init: np.ndarray      # (n, 2): initial-state and initial-wealth uniforms
    unif: np.ndarray      # (T, n, 2): transition and atom uniforms
    normal: np.ndarray    # (T, n, 2): return and income innovations


def _draws(seed: int, paths: range, T: int) -> _Draws:
    n = len(paths)
    init = np.empty((n, 2))
    unif = np.empty((T, n, 2))
    normal = np.empty((T, n, 2))
    for k, p in enumerate(paths):
        rng = np.random.default_rng([seed, p])
        init[k] = rng.random(2)
        unif[:, k] = rng.random((T, 2))
        normal[:, k] = rng.standard_normal((T, 2))
    return _Draws(init, unif, normal)


def _categorical(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cum_rows[k] is the cumulative distribution used for draw k
    idx = np.sum(u[:, None] >= cum_rows, axis=1)
    return np.minimum(idx, cum_rows.shape[1] - 1)


@dataclass
class _Economy:
    policy: PolicyTable
    ctx: SolverContext
    true_kernel: np.ndarray
    prior: np.ndarray


@dataclass
class _ChunkPaths:
    c: np.ndarray
    s: np.ndarray
    w: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    rb_c: np.ndarray | None = None
    rb_s: np.ndarray | None = None


def _initial(cfg: SimulationConfig, d: _Draws, true_kernel: np.ndarray, w0_default: float):
    n = d.init.shape[0]
    M = true_kernel.shape[0]
    if cfg.initial_state == "stationary":
        pi = stationary_distribution(true_kernel)
        z0 = _categorical(np.broadcast_to(np.cumsum(pi), (n, M)), d.init[:, 0])
    else:
        if not 0 <= cfg.initial_state < M:
            raise ConfigError("initial_state out of range")
        z0 = np.full(n, int(cfg.initial_state))
    iw = cfg.initial_wealth
    if iw is None:
        w0 = np.full(n, w0_default)
    elif isinstance(iw, dict) and "threshold_multiple" in iw:
        w0 = np.full(n, float(iw["threshold_multiple"]) * w0_default)
    elif isinstance(iw, dict):
        lo, hi = iw["uniform"]
        w0 = lo + (hi - lo) * d.init[:, 1]
    else:
        w0 = np.full(n, float(iw))
    if np.any(w0 <= 0):
        raise ConfigError("initial wealth must be positive")
    return z0.astype(np.int64), w0


def _run_chunk(econ: _Economy, cfg: SimulationConfig, d: _Draws, z0, w0,
               model: CalibratedHouseholdModel | None, paths: range) -> _ChunkPaths:
    ctx, pol = econ.ctx, econ.policy
    T = cfg.horizon
    n = z0.size
    N = ctx.candidates.n_candidates
    sh = ctx.shocks
    cum_true = np.cumsum(econ.true_kernel, axis=1)
    cum_atoms = np.cumsum(sh.prob, axis=1)
    out = _ChunkPaths(np.empty((T + 1, n)), np.empty((T + 1, n)), np.empty((T + 1, n)),
                      np.empty((T + 1, n), dtype=np.int64), np.empty((T + 1, n, N)))
    if cfg.rao_blackwell:
        out.rb_c = np.full((T + 1, n), np.nan)
        out.rb_s = np.full((T + 1, n), np.nan)
    z = z0.copy()
    w = w0.copy()
    theta = np.broadcast_to(econ.prior, (n, N)).copy()
    if cfg.belief_mode == "project":
        theta = ctx.beliefs.points[project_batch(ctx.beliefs, theta)]
    for t in range(T + 1):
        ell = project_batch(ctx.beliefs, theta)
        c = pol.evaluate_many(w, z, ell)
        s = w - c
        out.c[t], out.s[t], out.w[t], out.z[t], out.theta[t] = c, s, w, z, theta
        if t == T:
            break
        if cfg.rao_blackwell:
            out.rb_c[t + 1], out.rb_s[t + 1] = _one_step_expectation(econ, theta, z, s)
        if cfg.transitions == "true":
            rows = cum_true[z]
        else:
            rows = np.cumsum(mixture_kernels(ctx.candidates, theta)[np.arange(n), z], axis=1)
        z_next = _categorical(rows, d.unif[t, :, 0])
        if cfg.shock_draws == "continuous":
            if model is None:
                raise ConfigError("continuous shock draws need the calibrated model")
            R = model.gross_return(z_next, d.normal[t, :, 0])
            Y = model.income(z_next, d.normal[t, :, 1])
        else:
            a = _categorical(cum_atoms[z_next], d.unif[t, :, 1])
            R = sh.R[z_next, a]
            Y = sh.Y[z_next, a]
        w = R * s + Y
        try:
            theta = bayes_update_batch(ctx.candidates, theta, z, z_next)
        except LearningError as exc:
            row = exc.row or 0
            raise LearningError(exc.z, exc.z_next, exc.theta,
                                f"path {paths[row]}, period {t}->{t + 1}") from exc
        if cfg.belief_mode == "project":
            theta = ctx.beliefs.points[project_batch(ctx.beliefs, theta)]
        z = z_next
    return out


def _one_step_expectation(econ: _Economy, theta, z, s):
    """E[c_{t+1}] and E[s_{t+1}] given period-t state, integrating atoms and next states."""
    ctx, pol = econ.ctx, econ.policy
    sh = ctx.shocks
    n = z.size
    ec = np.zeros(n)
    es = np.zeros(n)
    for zh in range(ctx.n_states):
        pz = econ.true_kernel[z, zh]
        live = pz > 0
        if not live.any():
            continue
        post = np.array(theta)
        post[live] = bayes_update_batch(ctx.candidates, theta[live], z[live], np.full(live.sum(), zh))
        ell = project_batch(ctx.beliefs, post)
        wn = sh.R[zh][None, :] * s[:, None] + sh.Y[zh][None, :]
        cn = pol.evaluate_many(wn, zh, ell[:, None])
        ec += pz * np.sum(sh.prob[zh][None, :] * cn, axis=1)
        es += pz * np.sum(sh.prob[zh][None, :] * (wn - cn), axis=1)
    return ec, es


def _workers() -> int:
    n = os.environ.get(THREADS_ENV)
    return max(1, int(n)) if n else (os.cpu_count() or 1)


class _Acc:
    """Fixed-order sums over chunks."""

    def __init__(self):
        self.sums = {}

    def add(self, name, values):
        v = np.asarray(values, dtype=float)
        if name in self.sums:
            self.sums[name] = self.sums[name] + v
        else:
            self.sums[name] = v.copy()

    def __getitem__(self, name):
        return self.sums[name]


def _accumulate(acc: _Acc, prefix: str, cp: _ChunkPaths, M: int, rb: bool):
    c_mean = cp.c
    s_mean = cp.s
    if rb:
        c_mean = np.where(np.isnan(cp.rb_c), cp.c, cp.rb_c)
        s_mean = np.where(np.isnan(cp.rb_s), cp.s, cp.rb_s)
    acc.add(prefix + "c", c_mean.sum(axis=1))
    acc.add(prefix + "c2", (c_mean ** 2).sum(axis=1))
    acc.add(prefix + "raw_c", cp.c.sum(axis=1))
    acc.add(prefix + "raw_c2", (cp.c ** 2).sum(axis=1))
    acc.add(prefix + "s", s_mean.sum(axis=1))
    acc.add(prefix + "s2", (s_mean ** 2).sum(axis=1))
    acc.add(prefix + "w", cp.w.sum(axis=1))
    acc.add(prefix + "th", cp.theta.sum(axis=1))
    acc.add(prefix + "th2", (cp.theta ** 2).sum(axis=1))
    acc.add(prefix + "z", np.stack([(cp.z == k).sum(axis=1) for k in range(M)], axis=1))
    return c_mean, s_mean


def _mean_se(total, total2, K):
    mean = total / K
    if K < 2:
        return mean, np.full_like(mean, np.nan)
    var = np.maximum(total2 / K - mean ** 2, 0.0) * K / (K - 1)
    return mean, np.sqrt(var / K)


def _finish(acc: _Acc, prefix: str, K: int, header: dict) -> PathStatistics:
    mc, sc = _mean_se(acc[prefix + "c"], acc[prefix + "c2"], K)
    ms, ss = _mean_se(acc[prefix + "s"], acc[prefix + "s2"], K)
    raw = acc[prefix + "raw_c"] / K
    var = acc[prefix + "raw_c2"] / K - raw ** 2
    if np.any(var < -VAR_GUARD * np.maximum(1.0, raw ** 2)):
        raise NumericalError("negative consumption variance beyond rounding")
    vol = np.sqrt(np.maximum(var, 0.0))
    mt, st = _mean_se(acc[prefix + "th"], acc[prefix + "th2"], K)
    return PathStatistics(mc, sc, ms, ss, vol, acc[prefix + "w"] / K, mt, st,
                          acc[prefix + "z"] / K, dict(header))


def default_initial_wealth(*policies: PolicyTable) -> float:
    """Largest binding threshold across the given tables, plus one."""
    return max(float(np.max(p.knots[:, :, 0])) for p in policies) + 1.0


def _economy(p: PolicyTable, ctx: SolverContext, true_index: int, prior) -> _Economy:
    if not 0 <= true_index < ctx.candidates.n_candidates:
        raise ConfigError("true_kernel_index out of range")
    prior = np.asarray(prior, dtype=float)
    if prior.size != ctx.candidates.n_candidates:
        raise ConfigError("prior length differs from the number of candidates")
    return _Economy(p, ctx, ctx.candidates.matrices[true_index], prior)


def _chunks(K: int, size: int):
    return [range(lo, min(K, lo + size)) for lo in range(0, K, size)]


def simulate_panel(p: PolicyTable, cfg: SimulationConfig, ctx: SolverContext,
                   model: CalibratedHouseholdModel | None = None,
                   return_paths: bool = False):
    """Simulate K paths for T periods; returns PathStatistics (and raw paths if asked).

    Raw paths are only kept when ``return_paths`` is set, so use small panels.
    """
    econ = _economy(p, ctx, cfg.true_kernel_index, cfg.prior)
    w0_default = default_initial_wealth(p)
    header = _header(cfg, w0_default)
    M = ctx.n_states
    acc = _Acc()
    kept = []

    def work(paths):
        d = _draws(cfg.seed, paths, cfg.horizon)
        z0, w0 = _initial(cfg, d, econ.true_kernel, w0_default)
        return _run_chunk(econ, cfg, d, z0, w0, model, paths)

    chunks = _chunks(cfg.n_paths, cfg.chunk_size)
    with ThreadPoolExecutor(max_workers=_workers()) as ex:
        results = ex.map(work, chunks)
        for cp in results:
            _accumulate(acc, "", cp, M, cfg.rao_blackwell)
            if return_paths:
                kept.append(cp)
    stats = _finish(acc, "", cfg.n_paths, header)
    if return_paths:
        return stats, _concat(kept)
    return stats


def compare_learning_benchmark(p_learning: PolicyTable, p_full: PolicyTable, cfg: SimulationConfig,
                               ctx_learning: SolverContext, ctx_full: SolverContext,
                               model: CalibratedHouseholdModel | None = None) -> PairedStatistics:
    """Run the learning and full-information economies on identical draws.

    The full-information context must hold exactly one candidate, equal to the
    learning context's true kernel.
    """
    if ctx_full.candidates.n_candidates != 1:
        raise ConfigError("full-information benchmark must be solved with a single candidate")
    if ctx_learning.economy_id != ctx_full.economy_id or \
            ctx_learning.shocks.digest() != ctx_full.shocks.digest():
        raise ConfigError("learning and benchmark policies were solved on different economies")
    true_kernel = ctx_learning.candidates.matrices[cfg.true_kernel_index]
    if not np.array_equal(true_kernel, ctx_full.candidates.matrices[0]):
        raise ConfigError("benchmark kernel differs from the learning economy's true kernel")
    econ_l = _economy(p_learning, ctx_learning, cfg.true_kernel_index, cfg.prior)
    econ_f = _economy(p_full, ctx_full, 0, (1.0,))
    w0_default = default_initial_wealth(p_learning, p_full)
    header = _header(cfg, w0_default)
    M = ctx_learning.n_states
    acc = _Acc()

    def work(paths):
        d = _draws(cfg.seed, paths, cfg.horizon)
        z0, w0 = _initial(cfg, d, true_kernel, w0_default)
        return (_run_chunk(econ_l, cfg, d, z0, w0, model, paths),
                _run_chunk(econ_f, cfg, d, z0, w0, model, paths))

    with ThreadPoolExecutor(max_workers=_workers()) as ex:
        for cl, cf in ex.map(work, _chunks(cfg.n_paths, cfg.chunk_size)):
            lc, ls = _accumulate(acc, "L", cl, M, cfg.rao_blackwell)
            fc, fs = _accumulate(acc, "F", cf, M, cfg.rao_blackwell)
            acc.add("dc", (lc - fc).sum(axis=1))
            acc.add("dc2", ((lc - fc) ** 2).sum(axis=1))
            acc.add("ds", (ls - fs).sum(axis=1))
            acc.add("ds2", ((ls - fs) ** 2).sum(axis=1))
    K = cfg.n_paths
    learning = _finish(acc, "L", K, header)
    bench = _finish(acc, "F", K, header)
    dc, sdc = _mean_se(acc["dc"], acc["dc2"], K)
    ds, sds = _mean_se(acc["ds"], acc["ds2"], K)
    return PairedStatistics(learning, bench, dc, sdc, ds, sds, header)


def _header(cfg: SimulationConfig, w0_default: float) -> dict:
    iw = cfg.initial_wealth
    return {
        "n_paths": cfg.n_paths,
        "horizon": cfg.horizon,
        "seed": cfg.seed,
        "prior": list(cfg.prior),
        "true_kernel_index": cfg.true_kernel_index,
        "initial_wealth": _describe_wealth(iw, w0_default),
        "initial_state": cfg.initial_state,
        "belief_mode": cfg.belief_mode,
        "rao_blackwell": cfg.rao_blackwell,
        "shock_draws": cfg.shock_draws,
    }


def _describe_wealth(iw, w0_default: float) -> str:
    if iw is None:
        return repr(float(w0_default))
    if isinstance(iw, dict) and "threshold_multiple" in iw:
        return repr(float(iw["threshold_multiple"]) * w0_default)
    if isinstance(iw, dict):
        return f"uniform{list(iw['uniform'])}"
    return repr(float(iw))


def _concat(chunks: list[_ChunkPaths]) -> _ChunkPaths:
    def cat(name, axis=1):
        vals = [getattr(c, name) for c in chunks]
        return None if vals[0] is None else np.concatenate(vals, axis=axis)

    return _ChunkPaths(cat("c"), cat("s"), cat("w"), cat("z"), cat("theta"), cat("rb_c"), cat("rb_s"))
