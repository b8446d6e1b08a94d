"""Gauss-Hermite rules for expectations of functions of a standard normal."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .errors import DomainError

MAX_NODES = 64


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        weights = np.array(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1 or nodes.size == 0:
            raise DomainError("nodes and weights must be equal-length 1-d arrays")
        if np.any(weights <= 0):
            raise DomainError("quadrature weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise DomainError(f"weights sum to {weights.sum()!r}, expected 1")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return self.nodes.size

    def expect(self, g) -> float:
        """Approximate E[g(nu)] for nu ~ N(0, 1)."""
        return float(np.dot(self.weights, g(self.nodes)))


def gauss_hermite_normal(n: int) -> QuadratureRule:
    """n-point rule for N(0,1): nodes sqrt(2)*t_k, weights w_k/sqrt(pi).

    Exact for polynomials of degree <= 2n - 1.
    """
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or not 1 <= n <= MAX_NODES:
        raise DomainError(f"quadrature order must be an integer in [1, {MAX_NODES}], got {n!r}")
    t, w = hermgauss(int(n))
    x = math.sqrt(2.0) * t
    # exact symmetry: average each node with its mirror
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1]) / math.sqrt(math.pi)
    w = w / w.sum()
    return QuadratureRule(x, w)
