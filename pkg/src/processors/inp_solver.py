"""
InP Solver Processor Module

Per-cell, per-slot precoder design:

    minimize   U ||H V - G||_F^2 + Z ||V||_F^2
    subject to ||V||_F^2 <= P_max

solved through its KKT conditions. One thin SVD of H is computed per solve and
reused for every candidate, so evaluating V(lambda) or its power never needs a
new matrix inversion.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)


class CaseTag(str, Enum):
    RIDGE_INACTIVE = "ridge-inactive"
    RIDGE_ACTIVE_BISECTION = "ridge-active-bisection"
    MINNORM_UNDERDETERMINED = "minnorm-underdetermined"
    EXACT_OVERDETERMINED = "exact-overdetermined"


@dataclass(frozen=True)
class SolverSettings:
    power_tolerance: float = 1e-9
    bracket_growth: float = 2.0
    max_iterations: int = 200

    def __post_init__(self):
        if not 0 < self.power_tolerance < 1:
            raise ValueError(f"power_tolerance must lie in (0, 1), got {self.power_tolerance}")
        if self.bracket_growth <= 1:
            raise ValueError(f"bracket_growth must exceed 1, got {self.bracket_growth}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass(frozen=True, eq=False)
class SolverInput:
    H_hat: np.ndarray          # (K, N^c)
    G_hat: np.ndarray          # (K, K^c)
    Z: float
    U: float
    P_max: float
    settings: SolverSettings = field(default_factory=SolverSettings)
    lambda_hint: Optional[float] = None

    def __post_init__(self):
        if self.U <= 0:
            raise ValueError(f"Weight U must be positive, got {self.U}")
        if self.Z < 0:
            raise ValueError(f"Virtual queue Z must be nonnegative, got {self.Z}")
        if self.P_max <= 0:
            raise ValueError(f"P_max must be positive, got {self.P_max}")
        if self.H_hat.ndim != 2 or self.G_hat.ndim != 2 or self.H_hat.shape[0] != self.G_hat.shape[0]:
            raise ValueError(
                f"Channel {self.H_hat.shape} and demand {self.G_hat.shape} must be matrices with equal row counts"
            )
        if not (np.all(np.isfinite(self.H_hat)) and np.all(np.isfinite(self.G_hat))):
            raise ValueError("Solver inputs contain non-finite entries")
        if not np.isfinite(self.Z):
            raise ValueError("Virtual queue Z must be finite")


@dataclass(eq=False)
class SolverOutput:
    V_star: np.ndarray
    lambda_star: float
    case_tag: CaseTag
    achieved_power: float
    kkt_residual: float
    singular: bool = False
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Thin SVD H = A diag(sigma) B^H together with coeff = A^H G."""
    right_h: np.ndarray        # B^H, (r, N)
    sigma: np.ndarray          # (r,)
    coeff: np.ndarray          # (r, K^c)
    rank: int

    @property
    def rank_deficient(self) -> bool:
        return self.rank < self.sigma.size

    @property
    def correlation_norm(self) -> float:
        """||H^H G||_F."""
        return float(np.linalg.norm(self.sigma[:, None] * self.coeff))


def _svd(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        return scipy.linalg.svd(matrix, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        logger.warning("gesdd did not converge, retrying SVD with gesvd")
        return scipy.linalg.svd(matrix, full_matrices=False, lapack_driver="gesvd")


def decompose(H_hat: np.ndarray, G_hat: np.ndarray) -> Decomposition:
    left, sigma, right_h = _svd(H_hat)
    tolerance = max(H_hat.shape) * np.finfo(float).eps * (sigma[0] if sigma.size else 0.0)
    rank = int(np.count_nonzero(sigma > tolerance))
    return Decomposition(right_h=right_h, sigma=sigma, coeff=left.conj().T @ G_hat, rank=rank)


def _gains(decomposition: Decomposition, mu: float) -> np.ndarray:
    sigma = decomposition.sigma
    if mu > 0:
        return sigma / (sigma ** 2 + mu)
    # mu = 0: pseudo-inverse, numerically zero singular values contribute nothing
    gains = np.zeros_like(sigma)
    kept = slice(0, decomposition.rank)
    gains[kept] = 1.0 / sigma[kept]
    return gains


def ridge_precoder(decomposition: Decomposition, mu: float) -> np.ndarray:
    """V(mu) = (H^H H + mu I)^-1 H^H G, with pinv semantics at mu = 0."""
    gains = _gains(decomposition, mu)
    return decomposition.right_h.conj().T @ (gains[:, None] * decomposition.coeff)


def _power_at(decomposition: Decomposition, mu: float) -> float:
    gains = _gains(decomposition, mu)
    return float(np.sum(gains ** 2 * np.sum(np.abs(decomposition.coeff) ** 2, axis=1)))


def power_curve(decomposition: Decomposition, Z: float, U: float, lam: float) -> float:
    """||V(lambda)||_F^2 = sum_i sigma_i^2 ||coeff_i||^2 / (sigma_i^2 + (Z + lambda)/U)^2."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return _power_at(decomposition, (Z + lam) / U)


def bisect_lambda(
    decomposition: Decomposition,
    Z: float,
    U: float,
    P_max: float,
    settings: SolverSettings = SolverSettings(),
    lambda_hint: Optional[float] = None,
) -> Tuple[float, int]:
    """Finds lambda* > 0 with power(lambda*) in [P_max (1 - tol), P_max].

    Returns (lambda*, iterations). The upper end of the bracket is always
    feasible and is what gets returned.
    """
    tol = settings.power_tolerance
    # power(mu) <= ||H^H G||^2 / mu^2, so this lambda is always feasible.
    hi = lambda_hint if lambda_hint and lambda_hint > 0 else U * decomposition.correlation_norm / np.sqrt(P_max)
    hi = max(hi, np.finfo(float).tiny)

    growths = 0
    while power_curve(decomposition, Z, U, hi) > P_max:
        hi *= settings.bracket_growth
        growths += 1
        if growths > settings.max_iterations or not np.isfinite(hi):
            raise RuntimeError(f"Could not bracket lambda: power still above {P_max} at lambda={hi:.3e}")

    lo = 0.0
    iterations = 0
    while iterations < settings.max_iterations:
        if power_curve(decomposition, Z, U, hi) >= P_max * (1.0 - tol):
            break
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            logger.warning(f"Bisection reached floating-point resolution at lambda={hi:.6e}")
            break
        if power_curve(decomposition, Z, U, mid) > P_max:
            lo = mid
        else:
            hi = mid
        iterations += 1
    return hi, iterations


def stationarity_residual(inp: SolverInput, V: np.ndarray, lam: float) -> float:
    """||U (H^H H V - H^H G) + (Z + lambda) V||_F / max(1, ||H^H G||_F)."""
    H_h = inp.H_hat.conj().T
    correlation = H_h @ inp.G_hat
    gradient = inp.U * (H_h @ (inp.H_hat @ V) - correlation) + (inp.Z + lam) * V
    return float(np.linalg.norm(gradient) / max(1.0, np.linalg.norm(correlation)))


def solve_cell(inp: SolverInput) -> SolverOutput:
    K, N = inp.H_hat.shape
    if not np.any(inp.G_hat):
        V = np.zeros((N, inp.G_hat.shape[1]), dtype=complex)
        return SolverOutput(V, 0.0, CaseTag.RIDGE_INACTIVE, 0.0, 0.0)

    decomposition = decompose(inp.H_hat, inp.G_hat)
    singular = decomposition.rank < min(K, N)

    if inp.Z > 0:
        mu = inp.Z / inp.U
        V = ridge_precoder(decomposition, mu)
        feasible_tag = CaseTag.RIDGE_INACTIVE
    else:
        if singular:
            logger.warning(f"Rank-deficient InP channel (rank {decomposition.rank} of {min(K, N)}); using pseudo-inverse")
        V = ridge_precoder(decomposition, 0.0)
        feasible_tag = CaseTag.MINNORM_UNDERDETERMINED if K < N else CaseTag.EXACT_OVERDETERMINED

    lam, iterations, tag = 0.0, 0, feasible_tag
    if _power_at(decomposition, inp.Z / inp.U) > inp.P_max:
        lam, iterations = bisect_lambda(decomposition, inp.Z, inp.U, inp.P_max, inp.settings, inp.lambda_hint)
        V = ridge_precoder(decomposition, (inp.Z + lam) / inp.U)
        power = float(np.linalg.norm(V) ** 2)
        if 0 < power < inp.P_max * (1.0 - inp.settings.power_tolerance):
            # Bisection stopped short of the power band: move V onto it.
            logger.debug(f"Bisection ended at power {power:.6e} below P_max={inp.P_max:.6e}; rescaling V")
            V = V * np.sqrt(inp.P_max * (1.0 - 0.5 * inp.settings.power_tolerance) / power)
        tag = CaseTag.RIDGE_ACTIVE_BISECTION

    return SolverOutput(
        V_star=V,
        lambda_star=lam,
        case_tag=tag,
        achieved_power=float(np.linalg.norm(V) ** 2),
        kkt_residual=stationarity_residual(inp, V, lam),
        singular=singular,
        iterations=iterations,
    )


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    primal_violation: float
    dual_feasible: bool
    complementary_slackness: float

    def passes(self, tolerance: float = 1e-8) -> bool:
        return (
            self.stationarity < tolerance
            and self.primal_violation <= tolerance
            and self.dual_feasible
            and self.complementary_slackness <= tolerance
        )


def kkt_report(inp: SolverInput, out: SolverOutput) -> KktReport:
    """All four KKT checks, each scaled to be dimensionless."""
    power = float(np.linalg.norm(out.V_star) ** 2)
    lam = out.lambda_star
    return KktReport(
        stationarity=stationarity_residual(inp, out.V_star, lam),
        primal_violation=max(0.0, power - inp.P_max) / inp.P_max,
        dual_feasible=lam >= 0,
        complementary_slackness=lam * abs(power - inp.P_max) / (inp.P_max * max(1.0, lam)),
    )


def objective(inp: SolverInput, V: np.ndarray) -> float:
    return float(inp.U * np.linalg.norm(inp.H_hat @ V - inp.G_hat) ** 2 + inp.Z * np.linalg.norm(V) ** 2)
