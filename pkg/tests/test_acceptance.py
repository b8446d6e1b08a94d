"""Acceptance suite: one group of checks per numbered criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints
one PASS/FAIL line per criterion. Thresholds are the stated ones; a failing
check is reported as such, with the measured numbers in the assertion text.
"""

import itertools
import math
import time
import warnings

import numpy as np
import pytest

from ifplearn.analysis import (asymptotic_mpc, diagnose, euler_residuals, income_scaling_check,
                               default_probes)
from ifplearn.belief import (bayes_update, build_simplex_grid, mixture_kernel, project_to_grid,
                             simplex_grid_size)
from ifplearn.cli import main, run_oracle_compare
from ifplearn.config import load_config
from ifplearn.model import CandidateSet
from ifplearn.simulate import SimulationConfig, compare_learning_benchmark, default_initial_wealth
from ifplearn.stability import (certify, check_fosd_dominates, check_irreducible, check_monotone,
                                compute_discount_diagonal, consumption_lower_bound_certificate)
from ifplearn.solver import iterate, solve

from conftest import deterministic_context

pytestmark = pytest.mark.filterwarnings("ignore:R\\(z, eps\\) not nondecreasing")

STRUCTURAL = ("wealth_monotone", "savings_monotone", "concave", "slope_in_unit_interval",
              "binding_region", "threshold_formula")


# ---------------------------------------------------------------- criterion 1

@pytest.mark.acceptance(1)
def test_c1_simplex_combinatorics():
    t0 = time.perf_counter()
    assert build_simplex_grid(3, 20).count == 231
    for n in range(1, 6):
        for h in range(1, 31):
            assert simplex_grid_size(n, h) == math.comb(h + n - 1, n - 1)
            # direct enumeration count, independent of the closed form
            count = sum(1 for c in itertools.product(range(h + 1), repeat=n - 1) if sum(c) <= h)
            assert count == math.comb(h + n - 1, n - 1)
    assert time.perf_counter() - t0 < 1.0


@pytest.mark.acceptance(1)
def test_c1_built_grids_match_counts():
    for n, h in [(1, 30), (2, 30), (3, 30), (4, 20), (5, 12)]:
        g = build_simplex_grid(n, h)
        assert g.count == math.comb(h + n - 1, n - 1)
        assert len({tuple(int(v) for v in r) for r in g.compositions}) == g.count


# ---------------------------------------------------------------- criterion 2

@pytest.mark.acceptance(2)
def test_c2_stability_certificate():
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cfg = load_config(preset="paper-2026")
        rep = certify(cfg.candidates, cfg.shocks, cfg.candidates.state_order, p_star=cfg.p_star)
    elapsed = time.perf_counter() - t0
    order = cfg.candidates.state_order
    assert rep.envelope_constructed
    assert rep.p_star.tolist() == [[0.9855, 0.0145], [0.3, 0.7]]
    assert check_irreducible(rep.p_star) and check_monotone(rep.p_star, order)
    for Pi in cfg.candidates.matrices:
        assert check_fosd_dominates(rep.p_star, Pi, order)
    assert rep.spectral_radius_0 < 1 and rep.spectral_radius_1 < 1
    d = compute_discount_diagonal(cfg.shocks)
    for a in (0, 1):
        x = rep.perron_vector(a)
        assert np.all(x > 0)
        for Pi in cfg.candidates.matrices:
            assert np.all((Pi * d[a][None, :]) @ x < x)
    assert rep.certified
    assert elapsed < 1.0, f"{elapsed:.2f}s"


# ---------------------------------------------------------------- criterion 3

@pytest.mark.acceptance(3)
def test_c3_reduced_solve_converges(reduced_cfg, reduced_solution):
    assert (reduced_cfg.grids.G, reduced_cfg.grids.H) == (200, 20)
    assert (reduced_cfg.grids.quadrature_R, reduced_cfg.grids.quadrature_Y) == (7, 7)
    _, rep = reduced_solution
    assert rep.converged and rep.final_delta < 1e-4
    assert rep.wall_time < 300, f"{rep.wall_time:.1f}s"


@pytest.mark.acceptance(3)
def test_c3_euler_residuals_at_interior_probes(reduced_ctx, reduced_policy):
    probes = default_probes(reduced_policy)
    stats = euler_residuals(reduced_policy, reduced_ctx, probes)
    assert stats.n_interior > 0
    assert stats.max_abs < 1e-3, (
        f"max relative Euler residual {stats.max_abs:.4g} (mean {stats.mean_abs:.3g}) over "
        f"{stats.n_interior} interior probes")


# ---------------------------------------------------------------- criterion 4

@pytest.mark.acceptance(4)
@pytest.mark.parametrize("which", ["learning", "full_info"])
def test_c4_structural_properties(which, reduced_ctx, reduced_policy, full_info_ctx, full_info_solution,
                                  calib_candidates, calib_shocks):
    ctx, p = (reduced_ctx, reduced_policy) if which == "learning" else (full_info_ctx, full_info_solution[0])
    s_bar = consumption_lower_bound_certificate(ctx.candidates, calib_shocks, ctx.utility)
    d = diagnose(p, ctx, s_bar=s_bar)
    failed = [k for k in STRUCTURAL if not d.checks[k]]
    assert not failed, {k: d.details.get(k) for k in failed}
    slopes = np.diff(p.consumption, axis=2) / np.diff(p.knots, axis=2)
    assert np.all(np.diff(p.consumption, axis=2) >= -1e-10)
    assert np.all(np.diff(p.knots - p.consumption, axis=2) >= -1e-10)
    assert np.all(np.diff(slopes, axis=2) <= 1e-8)
    assert np.max(np.abs(d.threshold_formula - p.knots[:, :, 0])) <= 1e-10
    if s_bar is not None and s_bar < 1:
        assert np.all(p.consumption >= (1 - s_bar) * p.knots - 1e-8)


@pytest.mark.acceptance(4)
def test_c4_income_scaling(reduced_ctx, reduced_policy):
    worst, _ = income_scaling_check(reduced_policy, reduced_ctx, factor=1.1, tol=1e-4)
    assert worst >= -1e-6, f"min(c_scaled - c_base) = {worst:.3e}"


# ---------------------------------------------------------------- criterion 5

@pytest.mark.acceptance(5)
def test_c5_oracle_equivalence():
    t0 = time.perf_counter()
    cfg = load_config(preset="tiny")
    assert cfg.candidates.n_candidates == 1 and cfg.candidates.n_states == 2
    assert cfg.shocks.n_atoms == 3
    res = run_oracle_compare(cfg)
    elapsed = time.perf_counter() - t0
    assert res["wealth"].size == 50
    assert res["max_steps"] <= 2.0, f"max gap {res['max_steps']:.3f} oracle steps"
    assert res["egm_residual"] <= res["oracle_residual"]
    assert elapsed < 60, f"{elapsed:.1f}s"


# ---------------------------------------------------------------- criterion 6

@pytest.mark.acceptance(6)
def test_c6_analytic_limit():
    beta, R = 0.95, 1.02
    ctx = deterministic_context(beta=beta, R=R, G=2000, s_max=1e4, s_median=100.0)
    p, rep = solve(ctx, 1e-10, 200_000, log_every=0)
    assert rep.converged
    share = (beta * R) ** 0.5 / R
    top, seg = asymptotic_mpc(p, 0, 0)
    # consumption takes 1 - share of each extra unit of wealth, savings the rest
    assert abs(top - (1 - share)) < 1e-3, (top, 1 - share)
    assert abs((1 - top) - share) < 1e-3
    assert abs(seg - (1 - share)) < 1e-3


# ---------------------------------------------------------------- criterion 7

@pytest.mark.acceptance(7)
def test_c7_vertex_row_matches_known_kernel(reduced_ctx, reduced_policy, full_info_ctx, full_info_solution):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p, _ = solve(reduced_ctx, 1e-9, 50_000, initial=reduced_policy, log_every=0)
        q, _ = solve(full_info_ctx, 1e-9, 50_000, initial=full_info_solution[0], log_every=0)
    H = reduced_ctx.beliefs.resolution
    vertex = reduced_ctx.beliefs.index_of((0, H))        # all weight on the true kernel
    assert np.max(np.abs(p.knots[:, vertex] - q.knots[:, 0])) < 1e-6
    assert np.max(np.abs(p.consumption[:, vertex] - q.consumption[:, 0])) < 1e-6


@pytest.mark.acceptance(7)
def test_c7_vertex_prior_simulation_is_bit_exact(reduced_cfg, reduced_ctx, full_info_ctx, reduced_solution):
    n = reduced_solution[1].iterations
    p = iterate(reduced_ctx, n)
    q = iterate(full_info_ctx, n)
    cfg = SimulationConfig(1000, 120, (0.0, 1.0), 1, seed=reduced_cfg.simulation.seed)
    pair = compare_learning_benchmark(p, q, cfg, reduced_ctx, full_info_ctx, reduced_cfg.model)
    assert np.array_equal(pair.learning.mean_c, pair.benchmark.mean_c)
    assert np.array_equal(pair.learning.mean_s, pair.benchmark.mean_s)
    assert np.array_equal(pair.learning.vol_c, pair.benchmark.vol_c)
    assert np.all(pair.diff_c == 0) and np.all(pair.diff_s == 0)


# ---------------------------------------------------------------- criterion 8

W0_MULTIPLES = (1, 2, 5)


@pytest.fixture(scope="module")
def paired_runs(reduced_cfg, reduced_ctx, reduced_policy, full_info_ctx, full_info_solution):
    sim = reduced_cfg.simulation
    assert (sim.n_paths, sim.horizon, sim.prior, sim.true_kernel_index) == (5000, 600, (0.5, 0.5), 1)
    runs = {}
    t0 = time.perf_counter()
    for k in W0_MULTIPLES:
        cfg = SimulationConfig(sim.n_paths, sim.horizon, sim.prior, sim.true_kernel_index, seed=sim.seed,
                               initial_wealth={"threshold_multiple": k})
        runs[k] = compare_learning_benchmark(reduced_policy, full_info_solution[0], cfg,
                                             reduced_ctx, full_info_ctx, reduced_cfg.model)
    runs["elapsed"] = time.perf_counter() - t0
    runs["w0"] = default_initial_wealth(reduced_policy, full_info_solution[0])
    return runs


@pytest.mark.acceptance(8)
def test_c8_runtime(paired_runs):
    assert paired_runs["elapsed"] < 600, f"{paired_runs['elapsed']:.0f}s"


@pytest.mark.acceptance(8)
@pytest.mark.parametrize("k", W0_MULTIPLES)
def test_c8a_first_period_consumption_lower(paired_runs, k):
    r = paired_runs[k]
    assert r.diff_c[0] <= -3 * r.se_diff_c[0], (r.diff_c[0], r.se_diff_c[0])


@pytest.mark.acceptance(8)
@pytest.mark.parametrize("k", W0_MULTIPLES)
def test_c8b_gap_shrinks(paired_runs, k):
    r = paired_runs[k]
    assert abs(r.diff_c[120]) < abs(r.diff_c[0]), (r.diff_c[0], r.diff_c[120])


@pytest.mark.acceptance(8)
@pytest.mark.parametrize("k", W0_MULTIPLES)
def test_c8c_savings_higher(paired_runs, k):
    r = paired_runs[k]
    t = np.arange(12, 121)
    z = r.diff_s[t] / r.se_diff_s[t]
    assert np.all(r.diff_s[t] >= 2 * r.se_diff_s[t]), f"min z-score {z.min():.2f} at t={t[np.argmin(z)]}"


@pytest.mark.acceptance(8)
@pytest.mark.parametrize("k", W0_MULTIPLES)
def test_c8d_learning_overtakes(paired_runs, k):
    r = paired_runs[k]
    assert np.any(r.diff_c > 0)


@pytest.mark.acceptance(8)
@pytest.mark.parametrize("k", W0_MULTIPLES)
def test_c8e_long_run_volatility_lower(paired_runs, k):
    r = paired_runs[k]
    vl = float(np.mean(r.learning.vol_c[-120:]))
    vb = float(np.mean(r.benchmark.vol_c[-120:]))
    assert vl < vb, f"final-120 mean volatility: learning {vl:.6f}, benchmark {vb:.6f}"


@pytest.mark.acceptance(8)
@pytest.mark.parametrize("k", W0_MULTIPLES)
def test_c8f_posterior_concentrates(paired_runs, k):
    th = paired_runs[k].learning.mean_theta[:, 1]
    se = paired_runs[k].learning.se_theta[:, 1]
    T = th.size - 1
    assert th[T] - th[0] >= 5 * max(se[T], se[0]) and th[T] > th[0]
    # and along the way: rising on average over the first 120 months, above the prior from t=24 on
    assert np.mean(np.diff(th[:121])) > 0
    assert np.all(th[24:] > th[0])


# ---------------------------------------------------------------- criterion 9

def _tiny_config(tmp_path):
    import json
    from ifplearn.config import preset_document
    doc = preset_document("tiny")
    doc["simulation"].update({"n_paths": 500, "horizon": 36})
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.mark.acceptance(9)
def test_c9_cli_outputs_are_byte_identical(tmp_path, monkeypatch, capsys):
    cfg = _tiny_config(tmp_path)
    dirs = []
    for run, threads in enumerate(("1", "3")):
        monkeypatch.setenv("IFPLEARN_THREADS", threads)
        out = tmp_path / f"run{run}"
        o = ["--config", cfg, "--out", str(out)]
        pol = ["--policy", str(out / "policy.csv")]
        assert main(["grid-info", *o]) == 0
        assert main(["check", *o]) == 0
        assert main(["solve", *o]) == 0
        assert main(["solve", "--full-info", *o]) == 0
        main(["analyze", *o, *pol])                  # exit code judged elsewhere
        assert main(["simulate", *o, *pol]) == 0
        assert main(["simulate", *o, *pol, "--benchmark", str(out / "policy_full_info.csv")]) == 0
        assert main(["oracle-compare", *o]) == 0
        dirs.append(out)
    capsys.readouterr()
    a = sorted(f.name for f in dirs[0].iterdir())
    assert a == sorted(f.name for f in dirs[1].iterdir())
    assert len(a) >= 12
    for name in a:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name


@pytest.mark.acceptance(9)
def test_c9_calibrated_simulation_is_thread_independent(monkeypatch, reduced_cfg, reduced_ctx, reduced_policy):
    from ifplearn.simulate import simulate_panel
    cfg = SimulationConfig(3000, 60, (0.5, 0.5), 1, seed=reduced_cfg.simulation.seed, chunk_size=256)
    runs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("IFPLEARN_THREADS", threads)
        runs.append(simulate_panel(reduced_policy, cfg, reduced_ctx, reduced_cfg.model))
    for name in ("mean_c", "se_c", "mean_s", "vol_c", "mean_theta", "state_freq"):
        assert np.array_equal(getattr(runs[0], name), getattr(runs[1], name)), name


# ---------------------------------------------------------------- criterion 10

def _random_candidates(rng, n, m):
    mats = rng.uniform(0.0, 1.0, (n, m, m)) ** 3 + 1e-6
    return CandidateSet(mats / mats.sum(axis=2, keepdims=True))


@pytest.mark.acceptance(10)
def test_c10_bayes_preserves_simplex_and_martingale():
    rng = np.random.default_rng(20260101)
    calls = 0
    worst_sum = worst_mart = 0.0
    while calls < 100_000:
        n, m = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        cands = _random_candidates(rng, n, m)
        for _ in range(50):
            theta = rng.dirichlet(np.full(n, 0.5)) if n > 1 else np.ones(1)
            z = int(rng.integers(m))
            P = mixture_kernel(cands, theta)
            mean = np.zeros(n)
            for zn in range(m):
                post = bayes_update(cands, theta, z, zn).weights
                calls += 1
                assert np.all(post >= 0)
                worst_sum = max(worst_sum, abs(post.sum() - 1))
                mean += P[z, zn] * post
            worst_mart = max(worst_mart, float(np.max(np.abs(mean - theta))))
    assert calls >= 100_000
    assert worst_sum <= 1e-12, worst_sum
    assert worst_mart <= 1e-10, worst_mart


@pytest.mark.acceptance(10)
def test_c10_projection_is_identity_on_grid():
    for n, h in [(1, 5), (2, 99), (2, 20), (3, 20), (4, 10), (5, 6)]:
        g = build_simplex_grid(n, h)
        for ell in range(g.count):
            assert project_to_grid(g, g.points[ell]) == ell
