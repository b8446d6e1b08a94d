"""Command line driver: ``ifplearn <subcommand> [--preset NAME | --config PATH] ...``.

Exit codes: 0 success, 2 configuration error, 3 certification failure,
4 non-convergence, 5 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import analysis, simulate, stability
from .config import RunConfig, dump_document, load_config
from .errors import CertificationError, ConfigError, IfpError
from .solver import __version__, load_policy, save_policy, solve

log = logging.getLogger("ifplearn")

ORACLE_WEALTH_POINTS = 50
ORACLE_CONSUMPTION_STEPS = 200
ORACLE_STEP_TOLERANCE = 2.0


def _stamp(cfg: RunConfig) -> str:
    return f"ifplearn {__version__} config_hash={cfg.hash}"


def _out(cfg: RunConfig, args) -> Path:
    d = Path(args.out or cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, cfg: RunConfig, body: dict) -> Path:
    doc = {"tool_version": __version__, "config_hash": cfg.hash, **body}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset, args.reduced)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


# ------------------------------------------------------------------ subcommands

def cmd_grid_info(cfg: RunConfig, args) -> int:
    ctx = cfg.context()
    grid = ctx.beliefs
    sav = ctx.savings.points
    print(f"belief simplex: N={grid.n_candidates} H={grid.resolution} L={grid.count}")
    for ell in range(min(grid.count, 3)):
        print(f"  ell={ell} h={[int(v) for v in grid.compositions[ell]]} "
              f"theta={[float(v) for v in grid.points[ell]]}")
    print(f"savings grid: G={sav.size} s_min={float(sav[0])!r} s_max={float(sav[-1])!r} "
          f"median={float(np.median(sav))!r} first_step={float(sav[1] - sav[0])!r}")
    out = _out(cfg, args)
    path = out / "simplex_grid.csv"
    N = grid.n_candidates
    with open(path, "w", newline="") as fh:
        fh.write(f"# {_stamp(cfg)}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index"] + [f"h_{i + 1}" for i in range(N)] + [f"theta_{i + 1}" for i in range(N)])
        for ell in range(grid.count):
            wr.writerow([ell, *(int(v) for v in grid.compositions[ell]),
                         *(repr(float(v)) for v in grid.points[ell])])
    with open(out / "savings_grid.csv", "w", newline="") as fh:
        fh.write(f"# {_stamp(cfg)}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "s"])
        for g, v in enumerate(sav):
            wr.writerow([g, repr(float(v))])
    print(f"wrote {path}")
    return 0


def _certify(cfg: RunConfig) -> stability.StabilityReport:
    return stability.certify(cfg.candidates, cfg.shocks, cfg.candidates.state_order, p_star=cfg.p_star)


def cmd_check(cfg: RunConfig, args) -> int:
    out = _out(cfg, args)
    try:
        rep = _certify(cfg)
    except CertificationError as exc:
        if exc.report is not None:
            print(exc.report.format_table())
            _write_json(out / "stability.json", cfg, {"report": exc.report.to_dict()})
        raise
    print(rep.format_table())
    s_bar = stability.consumption_lower_bound_certificate(cfg.candidates, cfg.shocks, cfg.model.utility)
    print(f"consumption lower bound certificate s_bar* = {s_bar!r}")
    _write_json(out / "stability.json", cfg, {"report": rep.to_dict(), "s_bar_star": s_bar})
    return 0


def cmd_solve(cfg: RunConfig, args) -> int:
    out = _out(cfg, args)
    ctx = cfg.context(full_info=args.full_info)
    rep = None
    try:
        rep = stability.certify(ctx.candidates, ctx.shocks, ctx.candidates.state_order,
                                p_star=None if args.full_info else cfg.p_star)
    except CertificationError as exc:
        warnings.warn(f"stability not certified: {exc}")
        rep = exc.report
    policy, conv = solve(ctx, cfg.solver.tol, cfg.solver.max_iter, certificate=rep)
    name = "policy_full_info.csv" if args.full_info else "policy.csv"
    extra = {"config_hash": cfg.hash, "full_info": bool(args.full_info),
             "certified": bool(rep is not None and rep.certified)}
    path, side = save_policy(policy, out / name, extra, comment=_stamp(cfg))
    print(f"converged in {conv.iterations} iterations: max|dc|={conv.final_delta:.3e} "
          f"rho={conv.rho_delta:.3e}")
    print(f"wrote {path} and {side.name}")
    print(f"wall time {conv.wall_time:.2f}s", file=sys.stderr)
    return 0


def _policy_and_context(cfg: RunConfig, path):
    p = load_policy(path)
    full = bool(p.meta.get("full_info", False))
    ctx = cfg.context(full_info=full)
    want = ctx.policy_hash()
    got = p.meta.get("policy_hash")
    if got != want:
        raise ConfigError(f"policy {path} was solved for a different economy "
                          f"(hash {got}, config gives {want})", "--policy")
    return p, ctx


def cmd_analyze(cfg: RunConfig, args) -> int:
    if not args.policy:
        raise ConfigError("analyze needs --policy", "--policy")
    p, ctx = _policy_and_context(cfg, args.policy)
    out = _out(cfg, args)
    s_bar = stability.consumption_lower_bound_certificate(ctx.candidates, ctx.shocks, ctx.utility)
    diag = analysis.diagnose(p, ctx, s_bar=s_bar)
    report = diag.format_report()
    stem = Path(args.policy).stem
    lines = [f"# {_stamp(cfg)}", f"policy: {Path(args.policy).name} ({p.meta.get('policy_hash')})", report]
    mpc_gap = float(np.max(np.abs(diag.mpc_top_decile - diag.mpc_top_segment)))
    lines.append(f"asymptotic MPC range [{diag.mpc_top_decile.min():.6g}, {diag.mpc_top_decile.max():.6g}], "
                 f"max top-decile vs top-segment gap {mpc_gap:.3e}")
    lines.append(f"binding threshold range [{diag.threshold.min():.6g}, {diag.threshold.max():.6g}]")
    text = "\n".join(lines) + "\n"
    (out / f"{stem}_diagnostics.txt").write_text(text)
    diag.write_csv(out / f"{stem}_diagnostics.csv", p.beliefs, comment=_stamp(cfg))
    print(text, end="")
    if not diag.passed:
        failed = [k for k, v in diag.checks.items() if not v]
        raise CertificationError(f"policy checks failed: {', '.join(failed)}", failed[0])
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    if not args.policy:
        raise ConfigError("simulate needs --policy", "--policy")
    p, ctx = _policy_and_context(cfg, args.policy)
    out = _out(cfg, args)
    sim = cfg.simulation
    if p.meta.get("full_info"):
        sim = dataclasses.replace(sim, prior=(1.0,), true_kernel_index=0)
    if args.benchmark:
        pf, ctxf = _policy_and_context(cfg, args.benchmark)
        paired = simulate.compare_learning_benchmark(p, pf, sim, ctx, ctxf, cfg.model)
        paired.write_csv(out / "paired.csv", comment=_stamp(cfg))
        paired.learning.write_csv(out / "paths.csv", comment=_stamp(cfg))
        paired.benchmark.write_csv(out / "paths_benchmark.csv", comment=_stamp(cfg))
        print(f"initial consumption gap {paired.diff_c[0]:.6g} (se {paired.se_diff_c[0]:.3g}); "
              f"wrote paired.csv, paths.csv, paths_benchmark.csv")
        return 0
    stats = simulate.simulate_panel(p, sim, ctx, cfg.model)
    stats.write_csv(out / "paths.csv", comment=_stamp(cfg))
    print(f"mean consumption t=0 {stats.mean_c[0]:.6g}, t=T {stats.mean_c[-1]:.6g}; wrote paths.csv")
    return 0


def oracle_wealth_grid(cfg: RunConfig, n: int = ORACLE_WEALTH_POINTS) -> np.ndarray:
    """Geometric grid from a quarter of the smallest income atom to ten times the largest mean income.

    Starting below the lowest reachable wealth keeps V interpolated rather
    than extrapolated near the borrowing constraint.
    """
    lo = 0.25 * float(np.min(cfg.shocks.Y))
    hi = 10.0 * max(cfg.model.y_persistent)
    return np.geomspace(lo, hi, n)


def run_oracle_compare(cfg: RunConfig, n_consumption: int = ORACLE_CONSUMPTION_STEPS) -> dict:
    ctx = cfg.context()
    p, conv = solve(ctx, cfg.solver.tol, cfg.solver.max_iter, log_every=0)
    W = oracle_wealth_grid(cfg)
    oracle = analysis.brute_force_policy(ctx, W, n_consumption)
    cells = [(z, l) for z in range(ctx.n_states) for l in range(ctx.n_beliefs)]
    steps = np.zeros((ctx.n_states, ctx.n_beliefs, W.size))
    for z, l in cells:
        steps[z, l] = np.abs(p.evaluate_many(W, z, l) - oracle.policy.evaluate_many(W, z, l)) / oracle.consumption_step
    gap_c, gap_m = analysis.compare_policies(p, oracle.policy, ctx.utility, W, cells)
    r_egm = analysis.euler_residuals(p, ctx, W)
    r_orc = analysis.euler_residuals(oracle.policy, ctx, W)
    return {"wealth": W, "steps": steps, "egm": p, "oracle": oracle, "gap_c": gap_c, "gap_m": gap_m,
            "max_steps": float(steps.max()), "egm_residual": r_egm.max_abs,
            "oracle_residual": r_orc.max_abs, "egm_iterations": conv.iterations,
            "oracle_iterations": oracle.iterations}


def cmd_oracle_compare(cfg: RunConfig, args) -> int:
    out = _out(cfg, args)
    res = run_oracle_compare(cfg, args.oracle_steps)
    W, steps = res["wealth"], res["steps"]
    with open(out / "oracle.csv", "w", newline="") as fh:
        fh.write(f"# {_stamp(cfg)}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["z", "ell", "w", "c_egm", "c_oracle", "gap_in_steps"])
        M, L, _ = steps.shape
        for z in range(M):
            for l in range(L):
                ce = res["egm"].evaluate_many(W, z, l)
                co = res["oracle"].policy.evaluate_many(W, z, l)
                for i in range(W.size):
                    wr.writerow([z, l, repr(float(W[i])), repr(float(ce[i])), repr(float(co[i])),
                                 repr(float(steps[z, l, i]))])
    print(f"max gap {res['max_steps']:.3f} oracle steps (tolerance {ORACLE_STEP_TOLERANCE:g}); "
          f"sup |dc|={res['gap_c']:.3e}, sup |du'|={res['gap_m']:.3e}")
    print(f"max Euler residual: EGM {res['egm_residual']:.3e}, oracle {res['oracle_residual']:.3e}")
    ok = res["max_steps"] <= ORACLE_STEP_TOLERANCE and res["egm_residual"] <= res["oracle_residual"]
    if not ok:
        raise CertificationError("EGM and value-iteration oracle disagree", "oracle")
    return 0


COMMANDS = {
    "grid-info": cmd_grid_info,
    "check": cmd_check,
    "solve": cmd_solve,
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "oracle-compare": cmd_oracle_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--preset", metavar="NAME", help="shipped preset (paper-2026, tiny)")
    common.add_argument("--out", metavar="DIR", help="output directory (default: config output.dir)")
    common.add_argument("--policy", metavar="PATH", help="saved policy CSV (analyze, simulate)")
    common.add_argument("--seed", metavar="U64", type=int, help="override the simulation seed")
    common.add_argument("--reduced", action="store_true", help="CI scale: G=200, H=20, K=5000")
    common.add_argument("--print-config", action="store_true",
                        help="print the resolved configuration document and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ifplearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ifplearn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("grid-info", parents=[common], help="summarize the belief and savings grids")
    sub.add_parser("check", parents=[common], help="certify the stability condition")
    sp = sub.add_parser("solve", parents=[common], help="solve for the consumption policy")
    sp.add_argument("--full-info", action="store_true", help="solve with the true kernel only")
    sub.add_parser("analyze", parents=[common], help="structural checks on a saved policy")
    sp = sub.add_parser("simulate", parents=[common], help="Monte Carlo panel from a saved policy")
    sp.add_argument("--benchmark", metavar="PATH", help="full-information policy for a paired run")
    sp = sub.add_parser("oracle-compare", parents=[common], help="EGM against value iteration")
    sp.add_argument("--oracle-steps", type=int, default=ORACLE_CONSUMPTION_STEPS,
                    help="consumption grid size of the oracle")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # numba probes for TBB and warns when the installed version is too old; it falls back silently
    warnings.filterwarnings("ignore", message=".*TBB threading layer.*")
    try:
        cfg = _config(args)
        if args.print_config:
            sys.stdout.write(dump_document(cfg))
            return 0
        t0 = time.perf_counter()
        code = COMMANDS[args.command](cfg, args)
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
        return code
    except IfpError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        for attr in ("path", "check"):
            if getattr(exc, attr, ""):
                err[attr] = getattr(exc, attr)
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
