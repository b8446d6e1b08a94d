"""Stability certificates for the discounted-return process.

Covers the diagonal matrices of expected discounted returns, Perron roots,
stochastic-order checks on transition matrices, the common upper eigenvector
and contraction factor, and the CRRA consumption lower-bound certificate.

State orders are given best state first, e.g. ``(0, 1)`` when state 0
(expansion) dominates state 1 (recession).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Sequence

import numpy as np

from .errors import CertificationError, DomainError, NumericalError
from .model import CandidateSet, CrraUtility, StateShockMap

ORDER_TOL = 1e-12


@dataclass(frozen=True)
class DiscountedReturnDiagonal:
    d0: np.ndarray
    d1: np.ndarray

    def __post_init__(self):
        for name in ("d0", "d1"):
            v = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise DomainError(f"{name} entries must be positive and finite: {v}")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def __getitem__(self, alpha: int) -> np.ndarray:
        return (self.d0, self.d1)[alpha]

    def matrix(self, alpha: int) -> np.ndarray:
        return np.diag(self[alpha])


def compute_discount_diagonal(shocks: StateShockMap) -> DiscountedReturnDiagonal:
    d0 = shocks.expect(shocks.beta)
    d1 = shocks.expect(shocks.beta * shocks.R)
    return DiscountedReturnDiagonal(d0, d1)


def spectral_radius(A, rtol: float = 1e-12, max_iter: int = 10**6) -> float:
    """Perron root of a nonnegative matrix by power iteration from the ones vector.

    If the plain iteration has not settled after a few thousand steps (periodic
    matrices oscillate), it continues on (A + I)/2, whose Perron root is
    (r(A) + 1)/2.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError("spectral_radius needs a square matrix")
    if np.any(A < 0):
        raise DomainError("spectral_radius needs a nonnegative matrix")
    n = A.shape[0]
    shift = 0.0
    B = A
    x = np.ones(n)
    est = None
    switch_at = min(5000, max_iter // 2)
    for k in range(max_iter):
        if k == switch_at and shift == 0.0:
            shift = 1.0
            B = (A + np.eye(n)) / 2.0
            x = np.ones(n)
            est = None
        y = B @ x
        norm = np.max(np.abs(y))
        if norm == 0.0:
            return 0.0
        new = norm / np.max(np.abs(x))
        x = y / norm
        if est is not None and abs(new - est) <= rtol * max(abs(new), 1e-300):
            return float(2.0 * new - 1.0) if shift else float(new)
        est = new
    raise NumericalError(f"power iteration did not converge in {max_iter} iterations")


def _row_positions(order: Sequence[int], M: int) -> list[int]:
    order = [int(v) for v in order] if len(order) else list(range(M))
    if sorted(order) != list(range(M)):
        raise DomainError(f"order {order} is not a permutation of 0..{M - 1}")
    return order


def _fosd_row(p_row, q_row, best_first) -> bool:
    """True if distribution p_row FOSD-dominates q_row."""
    worst_first = list(reversed(best_first))
    cp = np.cumsum(np.asarray(p_row)[worst_first])
    cq = np.cumsum(np.asarray(q_row)[worst_first])
    return bool(np.all(cp <= cq + ORDER_TOL))


def check_monotone(P, order: Sequence[int] = ()) -> bool:
    """Rows of better states FOSD-dominate rows of adjacent worse states."""
    P = np.asarray(P, dtype=float)
    best_first = _row_positions(order, P.shape[0])
    for better, worse in zip(best_first[:-1], best_first[1:]):
        if not _fosd_row(P[better], P[worse], best_first):
            return False
    return True


def check_fosd_dominates(P, Q, order: Sequence[int] = ()) -> bool:
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape:
        raise DomainError("matrices must share dimension")
    best_first = _row_positions(order, P.shape[0])
    return all(_fosd_row(P[z], Q[z], best_first) for z in range(P.shape[0]))


def check_irreducible(P) -> bool:
    P = np.asarray(P)
    M = P.shape[0]
    adj = P > 0
    for start in range(M):
        seen = {start}
        stack = [start]
        while stack:
            v = stack.pop()
            for w in np.nonzero(adj[v])[0]:
                if w not in seen:
                    seen.add(int(w))
                    stack.append(int(w))
        if len(seen) < M:
            return False
    return True


def _dec(x: float) -> Decimal:
    # shortest round-trip repr: config decimals like 0.9855 stay exact
    return Decimal(repr(float(x)))


def upper_envelope(cands: CandidateSet, order: Sequence[int] = ()) -> np.ndarray:
    """Rowwise FOSD least upper bound of the candidates.

    Per row, the mass on each upper set (best k states) is the largest among
    the candidates. The arithmetic is done in decimal on the shortest repr of
    each entry so that an envelope row equal to a candidate row comes out
    bit-identical to it.
    """
    M = cands.n_states
    best_first = _row_positions(order or cands.state_order, M)
    out = np.zeros((M, M))
    for z in range(M):
        upper = []
        for k in range(1, M):
            best = max(sum((_dec(P[z, s]) for s in best_first[:k]), Decimal(0))
                       for P in cands.matrices)
            upper.append(best)
        upper.append(Decimal(1))
        prev = Decimal(0)
        for k, s in enumerate(best_first):
            out[z, s] = float(upper[k] - prev)
            prev = upper[k]
    return out


def _perron_vector(K: np.ndarray, lam: float, tol: float = 1e-14, max_iter: int = 10**6) -> np.ndarray:
    """Limit of h_{t+1} = K h_t / lam from h_0 = 1, scaled to max 1."""
    n = K.shape[0]
    B = K / lam
    h = np.ones(n)
    for k in range(max_iter):
        if k == 5000:
            # periodic K: same eigenvector, aperiodic iteration
            B = (K + lam * np.eye(n)) / (2.0 * lam)
        nxt = B @ h
        nxt = nxt / np.max(nxt)
        if np.max(np.abs(nxt - h)) <= tol:
            return nxt
        h = nxt
    raise NumericalError("Perron vector iteration did not converge")


@dataclass
class StabilityReport:
    p_star: np.ndarray
    diagonal: DiscountedReturnDiagonal | None = None
    spectral_radius_0: float | None = None
    spectral_radius_1: float | None = None
    perron_vector_0: np.ndarray | None = None
    perron_vector_1: np.ndarray | None = None
    contraction_factor_0: float | None = None
    contraction_factor_1: float | None = None
    checks: dict = field(default_factory=dict)
    candidate_ratios: dict = field(default_factory=dict)
    envelope_constructed: bool = True
    failure: str | None = None

    @property
    def certified(self) -> bool:
        if self.failure is not None or not self.checks or not all(self.checks.values()):
            return False
        return (self.spectral_radius_0 is not None and self.spectral_radius_0 < 1
                and self.spectral_radius_1 < 1
                and self.contraction_factor_0 < 1 and self.contraction_factor_1 < 1)

    def perron_vector(self, alpha: int) -> np.ndarray:
        return (self.perron_vector_0, self.perron_vector_1)[alpha]

    def contraction_factor(self, alpha: int) -> float:
        return (self.contraction_factor_0, self.contraction_factor_1)[alpha]

    def f_bound(self, t: int, alpha: int) -> float:
        """Upper bound on the t-step expected discounted return product, any belief."""
        x = self.perron_vector(alpha)
        return self.contraction_factor(alpha) ** t * float(np.max(x) / np.min(x))

    def to_dict(self) -> dict:
        def arr(v):
            return None if v is None else [float(a) for a in np.ravel(v)]

        return {
            "certified": self.certified,
            "failure": self.failure,
            "envelope_constructed": self.envelope_constructed,
            "p_star": np.asarray(self.p_star).tolist(),
            "d0": arr(self.diagonal.d0) if self.diagonal else None,
            "d1": arr(self.diagonal.d1) if self.diagonal else None,
            "spectral_radius_0": self.spectral_radius_0,
            "spectral_radius_1": self.spectral_radius_1,
            "perron_vector_0": arr(self.perron_vector_0),
            "perron_vector_1": arr(self.perron_vector_1),
            "contraction_factor_0": self.contraction_factor_0,
            "contraction_factor_1": self.contraction_factor_1,
            "checks": dict(self.checks),
            "candidate_ratios": {k: arr(v) for k, v in self.candidate_ratios.items()},
        }

    def format_table(self) -> str:
        lines = ["P* (rows = current state):"]
        for row in np.asarray(self.p_star):
            lines.append("  " + "  ".join(f"{v:.6g}" for v in row))
        lines.append("checks:")
        for name, ok in self.checks.items():
            lines.append(f"  {name:<28} {'pass' if ok else 'FAIL'}")
        if self.diagonal is not None:
            lines.append("E_z[beta]    : " + ", ".join(f"{v:.10g}" for v in self.diagonal.d0))
            lines.append("E_z[beta R]  : " + ", ".join(f"{v:.10g}" for v in self.diagonal.d1))
        for a in (0, 1):
            r = (self.spectral_radius_0, self.spectral_radius_1)[a]
            if r is None:
                continue
            x = self.perron_vector(a)
            lines.append(f"alpha={a}: r(P* D) = {r:.12g}  eta = {self.contraction_factor(a):.12g}  "
                         f"x = ({', '.join(f'{v:.8g}' for v in x)})")
        lines.append(f"certified: {'yes' if self.certified else 'no'}"
                     + (f" ({self.failure})" if self.failure else ""))
        return "\n".join(lines)


def certify(cands: CandidateSet, shocks: StateShockMap, order: Sequence[int] = (),
            p_star=None) -> StabilityReport:
    """Verify the uniform stability condition and build the common upper eigenvector.

    Raises CertificationError (with the partial report attached) when a
    structural check fails or a contraction factor is not below one.
    """
    M = cands.n_states
    best_first = _row_positions(order or cands.state_order, M)
    constructed = p_star is None
    if constructed:
        P = upper_envelope(cands, best_first)
    else:
        from .model import check_stochastic
        P = check_stochastic(np.array(p_star, dtype=float), "p_star").copy()
    report = StabilityReport(p_star=P, envelope_constructed=constructed)
    report.checks["irreducible"] = check_irreducible(P)
    report.checks["monotone"] = check_monotone(P, best_first)
    for i, Pi in enumerate(cands.matrices):
        report.checks[f"dominates_P{i + 1}"] = check_fosd_dominates(P, Pi, best_first)
    failed = [name for name, ok in report.checks.items() if not ok]
    if failed:
        report.failure = f"check failed: {', '.join(failed)}"
        raise CertificationError(report.failure, check=failed[0], report=report)

    diag = compute_discount_diagonal(shocks)
    report.diagonal = diag
    for a in (0, 1):
        K = P * diag[a][None, :]
        lam = spectral_radius(K)
        x = _perron_vector(K, lam)
        ratios = np.array([(Pi * diag[a][None, :]) @ x / x for Pi in cands.matrices])
        eta = float(np.max(ratios))
        setattr(report, f"spectral_radius_{a}", lam)
        setattr(report, f"perron_vector_{a}", x)
        setattr(report, f"contraction_factor_{a}", eta)
        report.candidate_ratios[f"alpha{a}"] = ratios
    for a in (0, 1):
        lam = (report.spectral_radius_0, report.spectral_radius_1)[a]
        if lam >= 1:
            report.failure = f"r(P* D_{a}) = {lam:.12g} >= 1"
            raise CertificationError(report.failure, check=f"spectral_radius_{a}", report=report)
        if report.contraction_factor(a) >= 1:
            report.failure = f"contraction factor eta_{a} = {report.contraction_factor(a):.12g} >= 1"
            raise CertificationError(report.failure, check=f"contraction_{a}", report=report)
    return report


def expected_discount_product(cands: CandidateSet, diag: DiscountedReturnDiagonal,
                              z: int, theta, t: int, alpha: int) -> float:
    """E_{z,theta} prod_{i=1}^t beta_i R_i^alpha with exact Bayes updating.

    Enumerates every state path of length t, so cost is M^t.
    """
    from .belief import bayes_update, mixture_kernel

    theta = np.asarray(getattr(theta, "weights", theta), dtype=float)
    if t == 0:
        return 1.0
    P = mixture_kernel(cands, theta)
    d = diag[alpha]
    total = 0.0
    for zh in range(cands.n_states):
        if P[z, zh] == 0:
            continue
        nxt = bayes_update(cands, theta, z, zh).weights
        total += P[z, zh] * d[zh] * expected_discount_product(cands, diag, zh, nxt, t - 1, alpha)
    return total


def lower_bound_ratio(cands: CandidateSet, shocks: StateShockMap, u: CrraUtility) -> float:
    """max over candidates i and states z of (sum_zh P_i(z, zh) E_zh[beta R^(1-gamma)])^(1/gamma)."""
    e = shocks.expect(shocks.beta * shocks.R ** (1.0 - u.gamma))
    if not np.all(np.isfinite(e)):
        raise NumericalError("E[beta R^(1-gamma)] is not finite")
    vals = np.einsum("izk,k->iz", cands.matrices, e)
    return float(np.max(vals) ** (1.0 / u.gamma))


def consumption_lower_bound_certificate(cands: CandidateSet, shocks: StateShockMap,
                                        u: CrraUtility) -> float | None:
    """Return s_bar < 1 certifying c*(w, z, theta) >= (1 - s_bar) w, or None."""
    s_bar = lower_bound_ratio(cands, shocks, u)
    return s_bar if s_bar < 1.0 else None
