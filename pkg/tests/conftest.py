import math
import warnings

import numpy as np
import pytest

from ifplearn.config import load_config
from ifplearn.model import CandidateSet, CrraUtility, StateShockMap
from ifplearn.solver import build_context, build_savings_grid, solve

P1 = [[0.8, 0.2], [0.3, 0.7]]
P2 = [[0.9855, 0.0145], [0.0968, 0.9032]]
BETA = math.exp(-0.05 / 12)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")
    config._acceptance_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n = mark.args[0]
    results = item.config._acceptance_results
    ok = rep.passed if rep.when == "call" else not rep.failed
    if rep.when == "setup" and ok:
        return
    results.setdefault(n, []).append((item.name, ok))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config._acceptance_results
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        tests = results[n]
        ok = all(passed for _, passed in tests)
        failed = [name for name, passed in tests if not passed]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'} ({len(tests)} checks)"
        if failed:
            line += "  failing: " + ", ".join(failed)
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def reduced_cfg():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cfg = load_config(preset="paper-2026", reduced=True)
        cfg.shocks
    return cfg


@pytest.fixture(scope="session")
def calib_shocks(reduced_cfg):
    return reduced_cfg.shocks


@pytest.fixture(scope="session")
def calib_candidates(reduced_cfg):
    return reduced_cfg.candidates


@pytest.fixture(scope="session")
def reduced_ctx(reduced_cfg):
    return reduced_cfg.context()


@pytest.fixture(scope="session")
def reduced_solution(reduced_ctx):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return solve(reduced_ctx, 1e-4, 50_000, log_every=0)


@pytest.fixture(scope="session")
def reduced_policy(reduced_solution):
    return reduced_solution[0]


@pytest.fixture(scope="session")
def full_info_ctx(reduced_cfg):
    return reduced_cfg.context(full_info=True)


@pytest.fixture(scope="session")
def full_info_solution(full_info_ctx):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return solve(full_info_ctx, 1e-4, 50_000, log_every=0)


def deterministic_context(beta=0.95, R=1.0, Y=1.0, gamma=2.0, G=200, s_max=200.0, s_median=20.0):
    """One state, one atom: no risk and no learning."""
    shocks = StateShockMap([[1.0]], [[beta]], [[R]], [[Y]], gamma=gamma)
    cands = CandidateSet([[[1.0]]])
    return build_context(CrraUtility(gamma), cands, shocks, build_savings_grid(G, s_max, s_median), 1)


def small_learning_context(H=4, G=60):
    """Two states, two candidates, a handful of atoms."""
    shocks = StateShockMap(
        prob=[[0.25, 0.5, 0.25], [0.25, 0.5, 0.25]],
        beta=np.full((2, 3), 0.96),
        R=[[1.0, 1.02, 1.04], [0.98, 1.0, 1.02]],
        Y=[[0.8, 1.0, 1.2], [0.3, 0.4, 0.5]],
        gamma=2.0,
    )
    cands = CandidateSet([P1, P2], (0, 1))
    return build_context(CrraUtility(2.0), cands, shocks, build_savings_grid(G, 50.0, 5.0), H)
