"""Beliefs over candidate transition matrices.

Bayes updating after an observed state transition, the subjective mixture
kernel, and the barycentric grid on the simplex with nearest-point lookup.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import DomainError, LearningError, ResourceError
from .model import CandidateSet

SIMPLEX_TOL = 1e-12
DEFAULT_GRID_CAP = 10**7


@dataclass(frozen=True)
class Belief:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DomainError(f"belief weights must be finite and nonnegative: {w}")
        if abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise DomainError(f"belief weights sum to {w.sum()!r}, expected 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)

    @classmethod
    def vertex(cls, n: int, i: int) -> "Belief":
        w = np.zeros(n)
        w[i] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, n: int) -> "Belief":
        return cls(np.full(n, 1.0 / n))


def _weights(theta) -> np.ndarray:
    return theta.weights if isinstance(theta, Belief) else np.asarray(theta, dtype=float)


@dataclass(frozen=True)
class SimplexGrid:
    """All points h/H with h a nonnegative integer composition of H into N parts.

    Points are ordered lexicographically in h, so for N=2 the first point is
    (0, 1) and the last (1, 0).
    """

    n_candidates: int
    resolution: int
    compositions: np.ndarray
    points: np.ndarray

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.count

    def belief(self, ell: int) -> Belief:
        return Belief(self.points[ell])

    def index_of(self, h: Sequence[int]) -> int:
        """Lexicographic rank of composition h (inverse of enumeration)."""
        h = [int(v) for v in h]
        if len(h) != self.n_candidates or sum(h) != self.resolution or min(h) < 0:
            raise DomainError(f"{h} is not a composition of {self.resolution} into {self.n_candidates} parts")
        rank, remaining = 0, self.resolution
        for i in range(self.n_candidates - 1):
            parts_left = self.n_candidates - i - 1
            for v in range(h[i]):
                # compositions with a smaller value in slot i
                rank += math.comb(remaining - v + parts_left - 1, parts_left - 1)
            remaining -= h[i]
        return rank


def _compositions(total: int, parts: int) -> Iterator[tuple]:
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def simplex_grid_size(N: int, H: int) -> int:
    return math.comb(H + N - 1, N - 1)


def build_simplex_grid(N: int, H: int, cap: int = DEFAULT_GRID_CAP) -> SimplexGrid:
    if N < 1 or H < 1:
        raise DomainError(f"need N >= 1 and H >= 1, got N={N}, H={H}")
    L = simplex_grid_size(N, H)
    if L > cap:
        raise ResourceError(f"simplex grid with N={N}, H={H} has {L} points, cap is {cap}")
    h = np.array(list(_compositions(H, N)), dtype=np.int64).reshape(L, N)
    pts = h / H
    h.setflags(write=False)
    pts.setflags(write=False)
    return SimplexGrid(N, H, h, pts)


def mixture_kernel(cands: CandidateSet, theta) -> np.ndarray:
    """P_theta = sum_i theta_i P_i."""
    w = _weights(theta)
    if w.size != cands.n_candidates:
        raise DomainError(f"belief has {w.size} weights for {cands.n_candidates} candidates")
    out = np.zeros((cands.n_states, cands.n_states))
    # explicit loop keeps the summation order fixed (vertex beliefs reproduce P_i bit for bit)
    for i in range(w.size):
        out = out + w[i] * cands.matrices[i]
    return out


def mixture_kernels(cands: CandidateSet, thetas: np.ndarray) -> np.ndarray:
    """Stack of P_theta for each row of ``thetas``: shape (L, M, M)."""
    thetas = np.asarray(thetas, dtype=float)
    out = np.zeros((thetas.shape[0], cands.n_states, cands.n_states))
    for i in range(cands.n_candidates):
        out = out + thetas[:, i, None, None] * cands.matrices[i][None]
    return out


def bayes_update(cands: CandidateSet, theta, z: int, z_next: int) -> Belief:
    w = _weights(theta)
    lik = cands.matrices[:, z, z_next]
    num = lik * w
    den = num.sum()
    if not den > 0:
        raise LearningError(z, z_next, w)
    return Belief(num / den)


def bayes_update_batch(cands: CandidateSet, thetas: np.ndarray, z: np.ndarray,
                       z_next: np.ndarray) -> np.ndarray:
    """Row-wise Bayes update; raises LearningError on the first impossible row."""
    lik = cands.matrices[:, z, z_next].T
    num = lik * thetas
    den = num.sum(axis=1)
    bad = np.nonzero(~(den > 0))[0]
    if bad.size:
        k = int(bad[0])
        raise LearningError(int(z[k]), int(z_next[k]), thetas[k], f"row {k}", row=k)
    return num / den[:, None]


def project_to_grid(grid: SimplexGrid, theta) -> int:
    """Index of the Euclidean-nearest grid point, lowest index on ties."""
    w = _weights(theta)
    if w.size != grid.n_candidates:
        raise DomainError("belief and grid disagree on the number of candidates")
    d = np.sum((grid.points - w[None, :]) ** 2, axis=1)
    return int(np.argmin(d))


def project_batch(grid: SimplexGrid, thetas: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Vectorized :func:`project_to_grid` for many beliefs (rows of ``thetas``).

    Identical beliefs are projected once.
    """
    thetas = np.asarray(thetas, dtype=float)
    if thetas.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    uniq, inverse = np.unique(thetas, axis=0, return_inverse=True)
    idx = np.empty(uniq.shape[0], dtype=np.int64)
    pts = grid.points
    for lo in range(0, uniq.shape[0], chunk):
        block = uniq[lo:lo + chunk]
        d = np.sum((block[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        idx[lo:lo + chunk] = np.argmin(d, axis=1)
    return idx[inverse.reshape(-1)]
