"""Compiled inner loops for policy evaluation and the Euler right-hand side.

Every routine that evaluates a piecewise-linear policy goes through
``_interp_one`` so scalar, batch and sweep evaluations agree bit for bit.
Per-element results never depend on thread scheduling.
"""

from __future__ import annotations

import os

import numba
import numpy as np
from numba import njit, prange

THREADS_ENV = "IFPLEARN_THREADS"


def configure_threads() -> int:
    n = os.environ.get(THREADS_ENV)
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    return numba.get_num_threads()


@njit(cache=True, inline="always")
def _interp_one(kn, cs, w, j):
    """Policy value at wealth w; j is the largest index with kn[j] <= w (or -1)."""
    G = kn.shape[0]
    if w <= kn[0]:
        return w
    if w > kn[G - 1]:
        slope = (cs[G - 1] - cs[G - 2]) / (kn[G - 1] - kn[G - 2])
        c = cs[G - 1] + slope * (w - kn[G - 1])
    elif j >= G - 1:
        c = cs[G - 1]
    else:
        slope = (cs[j + 1] - cs[j]) / (kn[j + 1] - kn[j])
        c = cs[j] + slope * (w - kn[j])
    if c > w:
        c = w
    return c


@njit(cache=True, inline="always")
def _marginal(c, gamma):
    if gamma == 2.0:
        return 1.0 / (c * c)
    if gamma == 1.0:
        return 1.0 / c
    return c ** (-gamma)


@njit(cache=True)
def _locate(kn, w):
    # largest j with kn[j] <= w, -1 if none
    lo, hi = 0, kn.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if kn[mid] <= w:
            lo = mid + 1
        else:
            hi = mid
    return lo - 1


@njit(cache=True, parallel=True)
def evaluate_batch(knots, cons, z, ell, w, out, clamped):
    """out[k] = policy(w[k], z[k], ell[k]); clamped[k] flags an active c <= w guard."""
    n = w.shape[0]
    for k in prange(n):
        kn = knots[z[k], ell[k]]
        cs = cons[z[k], ell[k]]
        j = _locate(kn, w[k])
        out[k] = _interp_one(kn, cs, w[k], j)
        G = kn.shape[0]
        raw_above = w[k] > kn[G - 1]
        if raw_above:
            slope = (cs[G - 1] - cs[G - 2]) / (kn[G - 1] - kn[G - 2])
            raw = cs[G - 1] + slope * (w[k] - kn[G - 1])
            clamped[k] = raw > w[k] * (1.0 + 1e-12)
        else:
            clamped[k] = False


@njit(cache=True, parallel=True)
def expected_marginal(knots, cons, wnext, weight, gamma, needed, out):
    """out[zh, l, g] = sum_a weight[zh, a] * u'(c(wnext[zh, a, g], zh, l)).

    ``wnext[zh, a, :]`` must be increasing so a single merge scan per atom
    locates every query.
    """
    M, L, G = knots.shape
    A = wnext.shape[1]
    for task in prange(M * L):
        zh = task // L
        l = task % L
        if not needed[zh, l]:
            continue
        kn = knots[zh, l]
        cs = cons[zh, l]
        acc = out[zh, l]
        for g in range(G):
            acc[g] = 0.0
        for a in range(A):
            wt = weight[zh, a]
            j = -1
            for g in range(G):
                w = wnext[zh, a, g]
                while j + 1 < G and kn[j + 1] <= w:
                    j += 1
                c = _interp_one(kn, cs, w, j)
                acc[g] += wt * _marginal(c, gamma)


@njit(cache=True, parallel=True)
def euler_rhs_table(Q, ptheta, nxt, out):
    """out[z, l, g] = sum_zh ptheta[l, z, zh] * Q[zh, nxt[z, zh, l], g]."""
    M, L, G = out.shape
    for task in prange(M * L):
        z = task // L
        l = task % L
        o = out[z, l]
        for g in range(G):
            o[g] = 0.0
        for zh in range(M):
            p = ptheta[l, z, zh]
            if p == 0.0:
                continue
            q = Q[zh, nxt[z, zh, l]]
            for g in range(G):
                o[g] += p * q[g]


@njit(cache=True)
def atom_sum(knots, cons, zh, l, wnext_atoms, weight_atoms, gamma):
    """Scalar counterpart of ``expected_marginal`` for one savings value."""
    kn = knots[zh, l]
    cs = cons[zh, l]
    total = 0.0
    for a in range(wnext_atoms.shape[0]):
        w = wnext_atoms[a]
        j = _locate(kn, w)
        c = _interp_one(kn, cs, w, j)
        total += weight_atoms[a] * _marginal(c, gamma)
    return total


def evaluate_many(knots, cons, z, ell, w):
    w = np.ascontiguousarray(w, dtype=np.float64)
    z = np.ascontiguousarray(np.broadcast_to(z, w.shape), dtype=np.int64)
    ell = np.ascontiguousarray(np.broadcast_to(ell, w.shape), dtype=np.int64)
    out = np.empty_like(w)
    clamped = np.zeros(w.shape, dtype=np.bool_)
    evaluate_batch(knots, cons, z.ravel(), ell.ravel(), w.ravel(), out.reshape(-1), clamped.reshape(-1))
    return out, clamped
