import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ifplearn.belief import bayes_update, build_simplex_grid, mixture_kernel, project_to_grid
from ifplearn.errors import CertificationError
from ifplearn.model import CandidateSet, CrraUtility, StateShockMap
from ifplearn.stability import (check_fosd_dominates, check_irreducible, check_monotone, certify,
                                compute_discount_diagonal, consumption_lower_bound_certificate,
                                expected_discount_product, spectral_radius, upper_envelope)

from conftest import BETA, P1, P2

CALIB = CandidateSet([P1, P2], (0, 1))
PSTAR = [[0.9855, 0.0145], [0.3, 0.7]]


def single_atom(beta, R, Y=1.0):
    return StateShockMap([[1.0]], [[beta]], [[R]], [[Y]])


def test_discount_diagonal_examples(calib_shocks):
    d = compute_discount_diagonal(single_atom(0.9, 1.1))
    assert d.d0.tolist() == [0.9]
    assert d.d1[0] == pytest.approx(0.99, abs=1e-15)
    dp = compute_discount_diagonal(calib_shocks)
    assert np.all(np.abs(dp.d0 - BETA) < 1e-15)
    assert abs(BETA - 0.99584) < 1e-5


def test_spectral_radius_examples(calib_shocks):
    assert spectral_radius(np.eye(2)) == pytest.approx(1.0, abs=1e-12)
    assert spectral_radius(np.diag([0.5, 0.3])) == pytest.approx(0.5, abs=1e-12)
    d1 = compute_discount_diagonal(calib_shocks).d1
    assert spectral_radius(np.array(PSTAR) * d1[None, :]) < 1
    # periodic matrix: power iteration must not oscillate forever
    assert spectral_radius(np.array([[0.0, 2.0], [0.5, 0.0]])) == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 2.0), min_size=9, max_size=9))
def test_spectral_radius_matches_eigvals(entries):
    A = np.array(entries).reshape(3, 3)
    assert spectral_radius(A) == pytest.approx(max(abs(np.linalg.eigvals(A))), rel=1e-9)


def test_monotone_examples():
    assert check_monotone([[1.0]])
    assert check_monotone(PSTAR, (0, 1))
    assert not check_monotone([[0.1, 0.9], [0.9, 0.1]], (0, 1))


def test_fosd_examples():
    assert check_fosd_dominates(P1, P1, (0, 1))
    assert check_fosd_dominates(PSTAR, P1, (0, 1))
    assert check_fosd_dominates(PSTAR, P2, (0, 1))
    assert not check_fosd_dominates(P1, P2, (0, 1))


def test_envelope_examples():
    env = upper_envelope(CALIB, (0, 1))
    assert env.tolist() == PSTAR
    assert np.array_equal(upper_envelope(CandidateSet([P1]), (0, 1)), np.array(P1))
    assert np.array_equal(upper_envelope(CandidateSet([P2, P2]), (0, 1)), np.array(P2))


def test_irreducible_examples():
    assert not check_irreducible(np.eye(2))
    assert check_irreducible(PSTAR)
    assert check_irreducible([[0.0, 1.0], [1.0, 0.0]])


def test_certify_scalar_chain():
    rep = certify(CandidateSet([[[1.0]]]), single_atom(0.95, 1.0))
    assert rep.spectral_radius_0 == pytest.approx(0.95, abs=1e-12)
    assert rep.spectral_radius_1 == pytest.approx(0.95, abs=1e-12)
    assert rep.perron_vector_1.tolist() == [1.0]
    assert rep.contraction_factor_1 == pytest.approx(0.95, abs=1e-12)


def test_certify_calibration(calib_shocks):
    rep = certify(CALIB, calib_shocks, (0, 1))
    assert rep.certified and rep.envelope_constructed
    assert rep.spectral_radius_0 < 1 and rep.spectral_radius_1 < 1
    assert rep.contraction_factor_0 < 1 and rep.contraction_factor_1 < 1
    for a in (0, 1):
        x = rep.perron_vector(a)
        assert np.all(x > 0)
        # monotone iteration from the constant 1 gives x increasing in the state order (best first)
        assert x[0] >= x[1]
        K = np.array(PSTAR) * compute_discount_diagonal(calib_shocks)[a][None, :]
        assert np.allclose(K @ x, rep.spectral_radius_0 * x if a == 0 else rep.spectral_radius_1 * x,
                           rtol=1e-10)
        d = compute_discount_diagonal(calib_shocks)[a]
        for Pi in CALIB.matrices:
            Kx = (Pi * d[None, :]) @ x
            assert np.all(Kx < x)
            assert np.all(Kx <= rep.contraction_factor(a) * x + 1e-10)


def test_certify_rejects_non_dominating_pstar(calib_shocks):
    with pytest.raises(CertificationError) as e:
        certify(CALIB, calib_shocks, (0, 1), p_star=P1)
    assert e.value.check.startswith("dominates")
    assert e.value.report is not None and not e.value.report.certified


def test_certify_rejects_explosive(calib_shocks):
    with pytest.raises(CertificationError) as e:
        certify(CandidateSet([[[1.0]]]), single_atom(0.95, 1.1))
    assert "spectral_radius_1" in e.value.check


def test_envelope_radius_dominates_candidates(calib_shocks):
    d = compute_discount_diagonal(calib_shocks)
    env = upper_envelope(CALIB, (0, 1))
    for a in (0, 1):
        if not np.all(np.diff(d[a]) <= 0):   # D nondecreasing along worst-to-best
            pytest.skip("D entries not monotone in the state order")
        r_env = spectral_radius(env * d[a][None, :])
        for Pi in CALIB.matrices:
            assert r_env >= spectral_radius(Pi * d[a][None, :]) - 1e-10


def test_lower_bound_certificate_examples():
    u = CrraUtility(2.0)
    s = consumption_lower_bound_certificate(CandidateSet([[[1.0]]]), single_atom(0.9, 1.0), u)
    assert s == pytest.approx(math.sqrt(0.9), abs=1e-15)
    assert 1 - s == pytest.approx(0.0513, abs=1e-4)
    assert consumption_lower_bound_certificate(CandidateSet([[[1.0]]]), single_atom(1.0, 1.0),
                                               CrraUtility(3.0)) is None


def test_lower_bound_certificate_calibrated(calib_shocks):
    s = consumption_lower_bound_certificate(CALIB, calib_shocks, CrraUtility(2.0))
    assert s is not None and 0 < s < 1


def _f_on_grid(cands, d, grid, z, ell, depth, memo=None):
    """e_z' K_theta K_theta1 ... 1 over every state path, beliefs projected to the grid each step."""
    if depth == 0:
        return 1.0
    memo = {} if memo is None else memo
    key = (z, ell, depth)
    if key not in memo:
        P = mixture_kernel(cands, grid.points[ell])
        v = 0.0
        for zh in range(cands.n_states):
            if P[z, zh] > 0:
                nxt = project_to_grid(grid, bayes_update(cands, grid.points[ell], z, zh))
                v += P[z, zh] * d[zh] * _f_on_grid(cands, d, grid, zh, nxt, depth - 1, memo)
        memo[key] = v
    return memo[key]


def test_f_bound_brute_force(calib_shocks):
    rep = certify(CALIB, calib_shocks, (0, 1))
    d = compute_discount_diagonal(calib_shocks)
    grid = build_simplex_grid(2, 4)
    for a in (0, 1):
        for t in range(1, 7):
            bound = rep.f_bound(t, a)
            for z, ell in itertools.product(range(2), range(grid.count)):
                f_grid = _f_on_grid(CALIB, d[a], grid, z, ell, t)
                f_exact = expected_discount_product(CALIB, d, z, grid.points[ell], t, a)
                assert f_grid <= bound + 1e-12
                assert f_exact <= bound + 1e-12
