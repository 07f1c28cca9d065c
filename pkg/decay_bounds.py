"""
Singular value decay bounds for off-diagonal blocks of the central Laurent
coefficient of psi(z) = phi(z)^{-1}.

The bounds have the form sigma_{1 + parity * l} <= gamma * Z_l(E, F), where
Z_l(E, F) is the Zolotarev ratio over rational functions of degree (l, l) and
E, F are eigenvalue sets of phi and of a diagonal sub-block inside and outside
the unit disc. Z_l is estimated from above by explicit rational functions:
greedy zero/pole placement on the discrete sets, a shifted-monomial family,
or the closed form for symmetric real intervals (elliptic integrals).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import hodlr
import linalg_kernel
from cyclic_reduction import LaurentTriple, QuadraticSolutions
from errors import DomainError, NoSplitting, NotDiagonalizable, PoleCollision

logger = logging.getLogger(__name__)

UNIT_CIRCLE_TOL = 1e-10
MAX_EIGVEC_CONDITION = 1e12
CIRCLE_SAMPLES = 512
PRIOR_GAMMA = 260.65


@dataclass(frozen=True)
class SpectralSplit:
    """Eigenvalues of phi split by the unit circle; infinite ones count as outside."""

    inside: np.ndarray
    outside: np.ndarray
    t: float
    m: int
    infinite_count: int

    @property
    def balanced(self) -> bool:
        return len(self.inside) == self.m and len(self.outside) == self.m

    @property
    def valid(self) -> bool:
        return self.balanced and self.t < 1

    def closest_to_one(self) -> Tuple[complex, complex]:
        """Inside and outside eigenvalues nearest to 1."""
        inside = self.inside[np.argmin(np.abs(self.inside - 1))]
        finite = self.outside[np.isfinite(self.outside)]
        outside = finite[np.argmin(np.abs(finite - 1))]
        return complex(inside), complex(outside)


def _canonical(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=complex)
    return points[np.lexsort((points.imag, points.real))]


def eigenvalues(phi: LaurentTriple) -> np.ndarray:
    """The 2m roots of det(A_minus + z A_zero + z^2 A_plus), infinite roots included."""
    M, N = linalg_kernel.companion_pencil(phi.A_minus, phi.A_zero, phi.A_plus)
    return linalg_kernel.generalized_eigvals(M, N)


def spectral_split(phi: LaurentTriple, tol: float = UNIT_CIRCLE_TOL) -> SpectralSplit:
    values = eigenvalues(phi)
    moduli = np.abs(values)
    near = np.isfinite(moduli) & (np.abs(1 - moduli) <= tol)
    if np.any(near):
        raise NoSplitting(
            f"{int(near.sum())} eigenvalues within {tol:g} of the unit circle; "
            "rescale A_plus and A_minus by alpha and 1/alpha"
        )
    inside = _canonical(values[moduli < 1])
    outside = _canonical(values[moduli > 1])
    t_inside = float(np.max(np.abs(inside))) if inside.size else 0.0
    t_outside = 1.0 / float(np.min(np.abs(outside))) if outside.size else 0.0
    split = SpectralSplit(inside=inside, outside=outside, t=max(t_inside, t_outside),
                          m=phi.m, infinite_count=int(np.sum(~np.isfinite(values))))
    logger.debug(f"Spectral split m={phi.m}: {len(inside)} inside, {len(outside)} outside, "
                 f"t={split.t:.6f}, {split.infinite_count} infinite")
    return split


def sub_block(phi: LaurentTriple, level: int = 0, position: int = 0,
              leaf_size: int = 1) -> LaurentTriple:
    """
    Restriction of phi to the diagonal block sharing rows with the chosen
    off-diagonal block: the leading block for an upper-right block, the
    trailing one for a lower-left block.
    """
    rows, _ = hodlr.block_ranges(phi.m, leaf_size, level, position)
    return LaurentTriple(phi.A_minus[rows, rows], phi.A_zero[rows, rows], phi.A_plus[rows, rows])


def _reciprocal(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=complex)
    out = np.zeros_like(points)
    finite = np.isfinite(points)
    nonzero = finite & (points != 0)
    out[nonzero] = 1 / points[nonzero]
    out[finite & (points == 0)] = np.inf
    return out


def point_sets(phi: LaurentTriple, level: int = 0, position: int = 0,
               leaf_size: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    E (inside the unit disc) and F (outside, finite points only) from the
    eigenvalues of phi and of its sub-block, closed under z -> 1/z.
    """
    whole = spectral_split(phi)
    part = spectral_split(sub_block(phi, level, position, leaf_size))
    E = np.concatenate([whole.inside, part.inside,
                        _reciprocal(whole.outside), _reciprocal(part.outside)])
    F = np.concatenate([whole.outside, part.outside,
                        _reciprocal(whole.inside), _reciprocal(part.inside)])
    F = F[np.isfinite(F)]
    return _canonical(E), _canonical(F)


def seed_point(split: SpectralSplit) -> complex:
    """Rightmost eigenvalue inside the unit disc."""
    if split.inside.size == 0:
        return 0j
    return complex(split.inside[np.argmax(split.inside.real)])


@dataclass(frozen=True)
class RationalBoundFamily:
    kind: str
    delta: Optional[complex]
    zeros: Tuple[complex, ...]
    poles: Tuple[complex, ...]
    E: np.ndarray
    F: np.ndarray
    perturbed: Tuple[int, ...] = ()


def _log_abs(values: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.abs(values))


def _ratio(log_E: np.ndarray, log_F: np.ndarray) -> float:
    if log_E.size == 0:
        return 0.0
    top = np.max(log_E)
    bottom = np.min(log_F) if log_F.size else np.inf
    if top == -np.inf:
        return 0.0
    return float(np.exp(top - bottom))


def _check_sets(E: np.ndarray, F: np.ndarray):
    if E.size == 0 or F.size == 0:
        raise DomainError("point sets E and F must be nonempty")
    if np.any(np.isin(E, F)):
        raise DomainError("point sets E and F intersect")


def greedy_rational_estimate(E, F, delta: complex, l: int) -> Tuple[float, RationalBoundFamily]:
    """
    max_E |r_l| / min_F |r_l| for r_l(z) = (z - delta) prod_{j<l} (z - q_j) / (z - p_j),
    with q_j the point of E where |r_j| is largest and p_j the point of F
    where it is smallest. Ties go to the first point in sorted order.
    """
    E = _canonical(E)
    F = _canonical(F)
    F = F[np.isfinite(F)]
    _check_sets(E, F)
    if l == 0:
        return 1.0, RationalBoundFamily("greedy-discrete", delta, (), (), E, F)

    log_E = _log_abs(E - delta)
    log_F = _log_abs(F - delta)
    zeros: List[complex] = []
    poles: List[complex] = []
    perturbed: List[int] = []
    diameter = float(np.max(np.abs(np.concatenate([E, F])[:, None] - np.concatenate([E, F])[None, :])))

    for j in range(1, l):
        q = E[int(np.argmax(log_E))]
        p = F[int(np.argmin(log_F))]
        if np.any(np.abs(E - p) <= 1e-12 * diameter):
            p = p + 1e-12 * diameter
            perturbed.append(j)
            logger.warning(f"Pole {j} collided with E; shifted by {1e-12 * diameter:.2e}")
            if np.any(E == p):
                raise PoleCollision(f"pole {j} at {p} still lies on E after perturbation")
        zeros.append(complex(q))
        poles.append(complex(p))
        log_E = log_E + _log_abs(E - q) - _log_abs(E - p)
        log_F = log_F + _log_abs(F - q) - _log_abs(F - p)

    family = RationalBoundFamily("greedy-discrete", delta, tuple(zeros), tuple(poles),
                                 E, F, tuple(perturbed))
    return _ratio(log_E, log_F), family


def running_minimum(values: Sequence[float]) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(values, dtype=float))


def greedy_rational_curve(E, F, delta: complex, max_l: int) -> np.ndarray:
    """Estimates for l = 0..max_l, made nonincreasing by a running minimum."""
    raw = [greedy_rational_estimate(E, F, delta, l)[0] for l in range(max_l + 1)]
    return running_minimum(raw)


def markov_rational_estimate(E, F, lambda1: complex, lambda2: complex, l: int) -> float:
    """max_E |r_l| / min_F |r_l| for r_l(z) = (z - lambda1) / (z - lambda2) z^(l - 1)."""
    E = np.asarray(E, dtype=complex)
    F = np.asarray(F, dtype=complex)
    if E.size == 0 or F.size == 0:
        raise DomainError("point sets E and F must be nonempty")
    if l == 0:
        return 1.0

    def log_r(points: np.ndarray) -> np.ndarray:
        finite = np.isfinite(points)
        out = np.empty(points.shape)
        z = points[finite]
        out[finite] = _log_abs(z - lambda1) - _log_abs(z - lambda2)
        if l > 1:
            out[finite] += (l - 1) * _log_abs(z)
        # |r_l| tends to 1 at infinity for l = 1 and grows without bound otherwise
        out[~finite] = 0.0 if l == 1 else np.inf
        return out

    with np.errstate(invalid="ignore"):
        log_E = log_r(E)
        log_F = log_r(F)
    if np.any(np.isnan(log_E)) or np.any(np.isnan(log_F)):
        return float("inf")
    return _ratio(log_E, log_F)


def markov_rational_curve(E, F, lambda1: complex, lambda2: complex, max_l: int) -> np.ndarray:
    raw = [markov_rational_estimate(E, F, lambda1, lambda2, l) for l in range(max_l + 1)]
    return running_minimum(raw)


def elliptic_k(x: float) -> float:
    """Complete elliptic integral of the first kind with modulus x, via the AGM."""
    if not 0 <= x < 1:
        raise DomainError(f"elliptic modulus must lie in [0, 1), got {x}")
    a, b = 1.0, math.sqrt(1 - x * x)
    while abs(a - b) > 1e-15 * a:
        a, b = (a + b) / 2, math.sqrt(a * b)
    return math.pi / (2 * a)


@dataclass(frozen=True)
class ZolotarevEstimate:
    value: float
    rho: float
    rho_tilde: float
    vacuous: bool


def zolotarev_rho(delta: float) -> Tuple[float, float]:
    """Exact rate and its delta -> 1 approximation."""
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    d4 = delta ** 4
    rho = math.exp(-math.pi * elliptic_k(math.sqrt(1 - d4)) / (2 * elliptic_k(delta ** 2)))
    rho_tilde = math.exp(-math.pi ** 2 / (2 * math.log(16 / (1 - d4))))
    return rho, rho_tilde


def zolotarev_closed_form(delta: float, l: int) -> ZolotarevEstimate:
    """
    Bound 2 rho^l / (1 - 2 rho^l) on the degree-2l Zolotarev ratio of the
    real sets [-delta, delta] and |x| >= 1 / delta. Z_0 = 1; a vacuous bound
    (2 rho^l >= 1) is returned as +inf and flagged.
    """
    rho, rho_tilde = zolotarev_rho(delta)
    if l < 0:
        raise DomainError("degree must be nonnegative")
    if l == 0:
        return ZolotarevEstimate(1.0, rho, rho_tilde, False)
    q = 2 * rho ** l
    if q >= 1:
        return ZolotarevEstimate(float("inf"), rho, rho_tilde, True)
    return ZolotarevEstimate(q / (1 - q), rho, rho_tilde, False)


def real_sets_delta(E: np.ndarray, F: np.ndarray, tol: float = 1e-10) -> Optional[float]:
    """Half-width delta enclosing E in [-delta, delta] and F in |x| >= 1/delta; None for complex sets."""
    if np.any(np.abs(E.imag) > tol) or np.any(np.abs(F.imag) > tol):
        return None
    finite = F[np.isfinite(F)]
    delta = max(float(np.max(np.abs(E))), 1.0 / float(np.min(np.abs(finite))))
    return delta if 0 < delta < 1 else None


def zolotarev_curve(delta: float, max_l: int) -> np.ndarray:
    """Z_l <= min(1, closed form at floor(l / 2)) for l = 0..max_l."""
    values = [min(1.0, zolotarev_closed_form(delta, l // 2).value) for l in range(max_l + 1)]
    return running_minimum(values)


def unit_circle_points(count: int = CIRCLE_SAMPLES) -> np.ndarray:
    return np.exp(2j * np.pi * np.arange(count) / count)


def finite_step_rate(E, max_l: int, delta: Optional[complex] = None,
                     count: int = CIRCLE_SAMPLES) -> np.ndarray:
    """Greedy estimates of Z_l(E, unit circle) on ``count`` circle samples."""
    E = _canonical(E)
    delta = delta if delta is not None else complex(E[np.argmax(E.real)])
    return greedy_rational_curve(E, unit_circle_points(count), delta, max_l)


@dataclass(frozen=True)
class DecayBound:
    gamma: float
    values: np.ndarray
    condition_factor: float
    parity: int
    estimates: np.ndarray = field(repr=False)

    def bound_for_sigma(self, index: int) -> float:
        """Bound on sigma_index (1-based) implied by the curve."""
        l = (index - 1) // self.parity
        l = min(l, len(self.values) - 1)
        return float(self.values[l])


def condition_factor(solutions: QuadraticSolutions) -> float:
    """max(kappa(V_G), kappa(V_G_hat)) * max(kappa(V_R), kappa(V_R_hat))."""
    conditions = {}
    for name in ("G", "G_hat", "R", "R_hat"):
        _, kappa = linalg_kernel.eigvecs_condition(getattr(solutions, name))
        if not np.isfinite(kappa) or kappa > MAX_EIGVEC_CONDITION:
            raise NotDiagonalizable(f"{name} has an ill-conditioned eigenbasis", kappa)
        conditions[name] = kappa
    logger.debug(f"Eigenvector conditions: {conditions}")
    return max(conditions["G"], conditions["G_hat"]) * max(conditions["R"], conditions["R_hat"])


def bound_curve(split: SpectralSplit, C_ref, mode: str, estimates: Sequence[float],
                solutions: Optional[QuadraticSolutions] = None) -> DecayBound:
    """
    gamma * Z_l for l = 0..len(estimates) - 1.

    symmetric-palindromic: gamma = 2 ||C_ref||, bounds sigma_{1+l}.
    general: gamma = 2 * condition_factor * ||C_ref||, bounds sigma_{1+2l}.
    """
    if not split.valid:
        raise NoSplitting(f"splitting does not hold (t={split.t:.6f}, balanced={split.balanced})")
    norm = linalg_kernel.norm2(np.asarray(C_ref))
    estimates = np.asarray(estimates, dtype=float)
    if mode == "symmetric-palindromic":
        factor, parity = 1.0, 1
    elif mode == "general":
        if solutions is None:
            raise ValueError("general mode needs the quadratic equation solutions")
        factor, parity = condition_factor(solutions), 2
    else:
        raise ValueError(f"unknown bound mode {mode!r}")
    gamma = 2 * factor * norm
    return DecayBound(gamma=gamma, values=gamma * estimates, condition_factor=factor,
                      parity=parity, estimates=estimates)


def prior_line(count: int, rate: float, gamma: float = PRIOR_GAMMA) -> np.ndarray:
    """gamma * rate^(l - 1) for l = 1..count."""
    return gamma * rate ** (np.arange(1, count + 1) - 1.0)


def measured_gamma(sigmas: Sequence[float], estimates: Sequence[float], parity: int,
                   floor: float = 1e-15) -> float:
    """Smallest constant making gamma * Z_l dominate the measured singular values."""
    sigmas = np.asarray(sigmas, dtype=float)
    ratio = 0.0
    for l, z in enumerate(estimates):
        index = parity * l
        if index >= sigmas.size or sigmas[index] <= floor:
            break
        ratio = max(ratio, sigmas[index] / z if z > 0 else float("inf"))
    return ratio


def decay_table(sigmas: Sequence[float], bound: DecayBound,
                zolotarev: Optional[Sequence[float]] = None,
                prior: Optional[Sequence[float]] = None, rows: int = 25) -> pd.DataFrame:
    """
    Columns l, sigma_l, bound_rational, bound_zolotarev, bound_prior for
    l = 1..rows; bound columns are the bounds implied for sigma_l.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    records = []
    for index in range(1, rows + 1):
        l = min((index - 1) // bound.parity, len(bound.values) - 1)
        records.append({
            "l": index,
            "sigma_l": sigmas[index - 1] if index <= sigmas.size else 0.0,
            "bound_rational": bound.bound_for_sigma(index),
            "bound_zolotarev": (bound.gamma * zolotarev[l]) if zolotarev is not None else np.nan,
            "bound_prior": prior[index - 1] if prior is not None else np.nan,
        })
    return pd.DataFrame.from_records(records, columns=[
        "l", "sigma_l", "bound_rational", "bound_zolotarev", "bound_prior"])


def write_dat(table: pd.DataFrame, path) -> None:
    """Whitespace-delimited columns under a '#'-prefixed header row."""
    with open(path, "w") as handle:
        handle.write("# " + " ".join(table.columns) + "\n")
        table.to_csv(handle, sep=" ", header=False, index=False, float_format="%.10e", na_rep="nan")
