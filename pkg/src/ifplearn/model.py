"""Preferences, the calibrated exogenous environment, and its discretization.

The discretized law (:class:`StateShockMap`) is what every solver routine
integrates against: per exogenous state a finite list of atoms
``(probability, beta, R, Y)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError
from .quadrature import QuadratureRule

ROW_SUM_TOL = 1e-12


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CrraUtility:
    """u(c) = c^(1-gamma)/(1-gamma), or log c when gamma == 1."""

    gamma: float

    def __post_init__(self):
        g = float(self.gamma)
        if not math.isfinite(g) or g <= 0:
            raise DomainError(f"gamma must be positive, got {self.gamma!r}")
        if abs(g - 1.0) < 1e-10:
            g = 1.0
        object.__setattr__(self, "gamma", g)

    @property
    def is_log(self) -> bool:
        return self.gamma == 1.0

    @property
    def marginal_at_zero(self) -> float:
        return math.inf

    def utility(self, c):
        c = np.asarray(c, dtype=float)
        if self.is_log:
            return np.log(c)
        return c ** (1.0 - self.gamma) / (1.0 - self.gamma)

    def marginal(self, c):
        return np.asarray(c, dtype=float) ** (-self.gamma)

    def inverse_marginal(self, m):
        return np.asarray(m, dtype=float) ** (-1.0 / self.gamma)


def marginal_utility(u: CrraUtility, c: float) -> float:
    if not c > 0:
        raise DomainError(f"marginal utility needs c > 0, got {c!r}")
    return float(u.marginal(c))


def inverse_marginal_utility(u: CrraUtility, m: float) -> float:
    if not m > 0:
        raise DomainError(f"inverse marginal utility needs m > 0, got {m!r}")
    if math.isinf(m):
        return 0.0
    return float(u.inverse_marginal(m))


@dataclass(frozen=True)
class CalibratedHouseholdModel:
    """Two-asset-free household: fixed risky share, state-dependent returns and income.

    R(z, e) = alpha*Rf*exp(mu(z) + sigma(z)*e) + (1 - alpha)*Rf
    Y(z, e) = y(z) * exp(sqrt(sigma_y2) * e)
    """

    beta: float
    gamma: float
    alpha_portfolio: float
    log_rf: float
    mu: Sequence[float]
    sigma: Sequence[float]
    y_persistent: Sequence[float]
    sigma_y2: float
    state_order: Sequence[int] = ()

    def __post_init__(self):
        mu = tuple(float(v) for v in self.mu)
        sigma = tuple(float(v) for v in self.sigma)
        y = tuple(float(v) for v in self.y_persistent)
        m = len(mu)
        if m == 0 or len(sigma) != m or len(y) != m:
            raise DomainError("mu, sigma and y_persistent must share a nonzero length")
        order = tuple(int(v) for v in self.state_order) if self.state_order else tuple(range(m))
        if sorted(order) != list(range(m)):
            raise DomainError(f"state_order {order} is not a permutation of 0..{m - 1}")
        if not 0.0 < self.beta < 1.0:
            raise DomainError("beta must lie in (0, 1)")
        if not 0.0 <= self.alpha_portfolio <= 1.0:
            raise DomainError("alpha_portfolio must lie in [0, 1]")
        if any(s <= 0 for s in sigma):
            raise DomainError("sigma must be positive in every state")
        if any(v <= 0 for v in y):
            raise DomainError("y_persistent must be positive in every state")
        if self.sigma_y2 <= 0:
            raise DomainError("sigma_y2 must be positive")
        CrraUtility(self.gamma)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "y_persistent", y)
        object.__setattr__(self, "state_order", order)
        for name in ("beta", "gamma", "alpha_portfolio", "log_rf", "sigma_y2"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def n_states(self) -> int:
        return len(self.mu)

    @property
    def rf(self) -> float:
        return math.exp(self.log_rf)

    @property
    def utility(self) -> CrraUtility:
        return CrraUtility(self.gamma)

    def gross_return(self, z, eps):
        z = np.asarray(z)
        mu = np.asarray(self.mu)[z]
        sig = np.asarray(self.sigma)[z]
        a, rf = self.alpha_portfolio, self.rf
        return a * rf * np.exp(mu + sig * eps) + (1.0 - a) * rf

    def income(self, z, eps):
        z = np.asarray(z)
        return np.asarray(self.y_persistent)[z] * np.exp(math.sqrt(self.sigma_y2) * eps)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "gamma": self.gamma,
            "alpha_portfolio": self.alpha_portfolio,
            "log_rf": self.log_rf,
            "mu": list(self.mu),
            "sigma": list(self.sigma),
            "y_persistent": list(self.y_persistent),
            "sigma_y2": self.sigma_y2,
            "state_order": list(self.state_order),
        }


@dataclass(frozen=True)
class CandidateSet:
    """Finite set of row-stochastic M x M matrices the agent entertains."""

    matrices: np.ndarray
    state_order: Sequence[int] = ()

    def __post_init__(self):
        mats = np.array(self.matrices, dtype=float)
        if mats.ndim == 2:
            mats = mats[None]
        if mats.ndim != 3 or mats.shape[0] < 1 or mats.shape[1] != mats.shape[2]:
            raise DomainError(f"candidates must be a stack of square matrices, got shape {mats.shape}")
        for i, p in enumerate(mats):
            check_stochastic(p, f"candidates[{i}]")
        m = mats.shape[1]
        order = tuple(int(v) for v in self.state_order) if len(self.state_order) else tuple(range(m))
        if sorted(order) != list(range(m)):
            raise DomainError(f"state_order {order} is not a permutation of 0..{m - 1}")
        object.__setattr__(self, "matrices", _frozen(mats))
        object.__setattr__(self, "state_order", order)

    @property
    def n_candidates(self) -> int:
        return self.matrices.shape[0]

    @property
    def n_states(self) -> int:
        return self.matrices.shape[1]

    def __getitem__(self, i) -> np.ndarray:
        return self.matrices[i]

    def __len__(self):
        return self.n_candidates

    def subset(self, indices: Sequence[int]) -> "CandidateSet":
        return CandidateSet(self.matrices[list(indices)], self.state_order)


def check_stochastic(p, where: str = "matrix") -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise DomainError(f"{where} must be square, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise DomainError(f"{where} has negative or non-finite entries")
    sums = p.sum(axis=1)
    for r, s in enumerate(sums):
        if abs(s - 1.0) > ROW_SUM_TOL:
            raise DomainError(f"{where} row {r} sums to {s!r}, expected 1", f"{where}[{r}]")
    return p


@dataclass(frozen=True)
class StateShockMap:
    """Discretized (beta, R, Y) law: arrays of shape (M, A), one row per state.

    All states carry the same number of atoms A.
    """

    prob: np.ndarray
    beta: np.ndarray
    R: np.ndarray
    Y: np.ndarray
    gamma: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        arrs = [np.array(getattr(self, k), dtype=float) for k in ("prob", "beta", "R", "Y")]
        arrs = [a[None] if a.ndim == 1 else a for a in arrs]
        shape = arrs[0].shape
        if any(a.shape != shape for a in arrs) or len(shape) != 2:
            raise DomainError("prob, beta, R, Y must share shape (M, A)")
        prob, beta, R, Y = arrs
        if np.any(prob <= 0) or np.any(prob > 1):
            raise DomainError("atom probabilities must lie in (0, 1]")
        for z, s in enumerate(prob.sum(axis=1)):
            if abs(s - 1.0) > 1e-12:
                raise DomainError(f"atom probabilities of state {z} sum to {s!r}")
        if np.any(beta <= 0) or np.any(R <= 0):
            raise DomainError("beta and R atoms must be strictly positive")
        if np.any(Y < 0) or not np.all(np.isfinite(Y)):
            raise DomainError("income atoms must be finite and nonnegative")
        if self.gamma is not None and np.any(Y == 0):
            # E[beta u'(Y)] is infinite with a zero-income atom under CRRA
            raise DomainError("zero income atom makes E[beta u'(Y)] infinite")
        for name, a in zip(("prob", "beta", "R", "Y"), arrs):
            object.__setattr__(self, name, _frozen(a))

    @property
    def n_states(self) -> int:
        return self.prob.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.prob.shape[1]

    def expect(self, values) -> np.ndarray:
        """Per-state expectation of an (M, A) array of atom values."""
        return np.sum(self.prob * values, axis=1)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.prob, self.beta, self.R, self.Y):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def discretize_model(m: CalibratedHouseholdModel, rule_R: QuadratureRule,
                     rule_Y: QuadratureRule) -> StateShockMap:
    """Tensor-product discretization of the return and income innovations.

    Atom (j, k) of state z uses return node j and income node k; the atom index
    is ``j * len(rule_Y) + k`` so atoms with equal j share the same return draw
    across states.
    """
    nR, nY = len(rule_R), len(rule_Y)
    M = m.n_states
    eR = np.repeat(rule_R.nodes, nY)
    eY = np.tile(rule_Y.nodes, nR)
    p = np.repeat(rule_R.weights, nY) * np.tile(rule_Y.weights, nR)
    p = p / p.sum()
    z = np.arange(M)[:, None]
    R = m.gross_return(z, eR[None, :])
    Y = m.income(z, eY[None, :])
    prob = np.broadcast_to(p, (M, p.size))
    beta = np.full((M, p.size), m.beta)

    bad = return_monotonicity_violations(R, m.state_order)
    if bad:
        eps = sorted({float(eR[a]) for _, _, a in bad})
        warnings.warn(
            f"R(z, eps) not nondecreasing in z at {len(bad)} atom pairs "
            f"(return nodes {', '.join(f'{e:.4g}' for e in eps)})",
            stacklevel=2,
        )
    return StateShockMap(prob, beta, R, Y, gamma=m.gamma,
                         meta={"violations": bad, "n_R": nR, "n_Y": nY})


def return_monotonicity_violations(R: np.ndarray, state_order: Sequence[int]):
    """Atoms where R fails to be nondecreasing along the order (best state first).

    Returns (better_state, worse_state, atom) triples with R[better] < R[worse].
    """
    out = []
    order = list(state_order)
    for better, worse in zip(order[:-1], order[1:]):
        for a in np.nonzero(R[better] < R[worse])[0]:
            out.append((better, worse, int(a)))
    return out


def closed_form_mean_return(m: CalibratedHouseholdModel, z: int) -> float:
    a, rf = m.alpha_portfolio, m.rf
    return a * rf * math.exp(m.mu[z] + 0.5 * m.sigma[z] ** 2) + (1 - a) * rf


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))
