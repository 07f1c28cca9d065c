"""
Cyclic reduction on the matrix Laurent polynomial

    phi(z) = z^{-1} A_minus + A_zero + z A_plus

together with the auxiliary hat/tilde sequences, the functional identity that
ties each iterate back to psi(z) = phi(z)^{-1}, the Laurent coefficients H_j of
psi and the minimal solutions G, G_hat, R, R_hat of the four associated
quadratic matrix equations.
"""

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.fft
from pydantic import BaseModel, Field

import linalg_kernel
from block_backend import make_backend
from errors import (AliasWarning, Breakdown, NoConvergence, ResidualTooLarge, ShapeMismatch,
                    SingularMatrix, SpectralRadiusViolation)
from hodlr import TruncationPolicy
from parallel import ordered_map

logger = logging.getLogger(__name__)

# cap on the unit-circle sample count used by the coupling check
MAX_COUPLING_SAMPLES = 4096


@dataclass(frozen=True)
class LaurentTriple:
    """The three m x m coefficients of phi(z); stored densely."""

    A_minus: np.ndarray
    A_zero: np.ndarray
    A_plus: np.ndarray
    backend: str = "dense"

    def __post_init__(self):
        blocks = []
        for name in ("A_minus", "A_zero", "A_plus"):
            block = linalg_kernel.as_dense(getattr(self, name), name)
            object.__setattr__(self, name, block)
            blocks.append(block)
        m = blocks[1].shape[0]
        if any(block.shape != (m, m) for block in blocks):
            raise ShapeMismatch(
                f"Laurent coefficients must be square of equal size, got {[b.shape for b in blocks]}"
            )
        if self.backend not in ("dense", "hodlr"):
            raise ValueError(f"unknown backend {self.backend!r}")

    @classmethod
    def from_scalars(cls, a_minus: float, a_zero: float, a_plus: float) -> "LaurentTriple":
        return cls(np.array([[a_minus]], float), np.array([[a_zero]], float),
                   np.array([[a_plus]], float))

    @property
    def m(self) -> int:
        return self.A_zero.shape[0]

    def evaluate(self, z: complex) -> np.ndarray:
        return self.A_minus / z + self.A_zero + z * self.A_plus

    def swapped(self) -> "LaurentTriple":
        """phi(1/z): exchanges the roles of A_minus and A_plus."""
        return replace(self, A_minus=self.A_plus, A_plus=self.A_minus)

    def is_real(self) -> bool:
        return all(np.isrealobj(b) for b in (self.A_minus, self.A_zero, self.A_plus))


class StoppingRule(BaseModel):
    """Stop when ||A_plus|| ||A_minus|| <= tol ||A_zero||^2 or after max_steps."""

    tol: float = Field(1e-14, gt=0.0)
    max_steps: int = Field(50, ge=0)


@dataclass(frozen=True)
class StepTelemetry:
    step: int
    norm_minus: float
    norm_plus: float
    norm_zero: float
    max_offdiag_rank: Optional[int]
    elapsed_seconds: float

    def line(self) -> str:
        rank = "-" if self.max_offdiag_rank is None else str(self.max_offdiag_rank)
        return (f"{self.step} {self.norm_minus:.6e} {self.norm_plus:.6e} "
                f"{rank} {self.elapsed_seconds:.6f}")


@dataclass(frozen=True)
class CrState:
    """One iterate of cyclic reduction; blocks are in the backend's format."""

    step: int
    a_minus: object
    a_zero: object
    a_plus: object
    a_hat: object
    a_tilde: object
    backend: object
    norms_history: Tuple[StepTelemetry, ...] = ()
    started: float = field(default_factory=time.perf_counter)

    @property
    def triple(self) -> LaurentTriple:
        to_dense = self.backend.to_dense
        return LaurentTriple(to_dense(self.a_minus), to_dense(self.a_zero),
                             to_dense(self.a_plus), backend=self.backend.name)

    def dense(self, name: str) -> np.ndarray:
        return self.backend.to_dense(getattr(self, name))

    @property
    def latest(self) -> StepTelemetry:
        return self.norms_history[-1]


def _telemetry(state: CrState) -> StepTelemetry:
    backend = state.backend
    ranks = [backend.max_rank(b) for b in (state.a_minus, state.a_zero, state.a_plus)]
    record = StepTelemetry(
        step=state.step,
        norm_minus=backend.norm(state.a_minus),
        norm_plus=backend.norm(state.a_plus),
        norm_zero=backend.norm(state.a_zero),
        max_offdiag_rank=None if ranks[0] is None else max(ranks),
        elapsed_seconds=time.perf_counter() - state.started,
    )
    logger.debug(f"CR {record.line()}")
    return record


def initial_state(phi: LaurentTriple, policy: Optional[TruncationPolicy] = None,
                  backend: Optional[str] = None) -> CrState:
    """h = 0: the input coefficients, with A_hat = A_tilde = A_zero."""
    ops = make_backend(backend or phi.backend, policy)
    a_zero = ops.convert(phi.A_zero)
    state = CrState(step=0, a_minus=ops.convert(phi.A_minus), a_zero=a_zero,
                    a_plus=ops.convert(phi.A_plus), a_hat=a_zero, a_tilde=a_zero,
                    backend=ops)
    return replace(state, norms_history=(_telemetry(state),))


def cr_step(state: CrState, policy: Optional[TruncationPolicy] = None) -> CrState:
    """
    One cyclic reduction step with S = (A_zero^(h))^{-1}:

        A_zero'  = A_zero  - A_plus S A_minus - A_minus S A_plus
        A_plus'  = -A_plus S A_plus
        A_minus' = -A_minus S A_minus
        A_hat'   = A_hat   - A_plus S A_minus
        A_tilde' = A_tilde - A_minus S A_plus

    Raises Breakdown when A_zero^(h) is numerically singular.
    """
    ops = state.backend
    if policy is not None and ops.name == "hodlr":
        ops = make_backend("hodlr", policy)

    try:
        factor = ops.factor(state.a_zero)
    except SingularMatrix as e:
        raise Breakdown(f"A_zero became singular: {e}", step=state.step) from e

    plus_s = factor.rdiv(state.a_plus)
    minus_s = factor.rdiv(state.a_minus)
    plus_s_minus = ops.mul(plus_s, state.a_minus)
    minus_s_plus = ops.mul(minus_s, state.a_plus)

    new = replace(
        state,
        step=state.step + 1,
        a_zero=ops.sub(ops.sub(state.a_zero, plus_s_minus), minus_s_plus),
        a_plus=ops.neg(ops.mul(plus_s, state.a_plus)),
        a_minus=ops.neg(ops.mul(minus_s, state.a_minus)),
        a_hat=ops.sub(state.a_hat, plus_s_minus),
        a_tilde=ops.sub(state.a_tilde, minus_s_plus),
        backend=ops,
    )
    return replace(new, norms_history=state.norms_history + (_telemetry(new),))


def _converged(record: StepTelemetry, stop: StoppingRule) -> bool:
    return record.norm_plus * record.norm_minus <= stop.tol * record.norm_zero ** 2


def run_cr(phi: LaurentTriple, policy: Optional[TruncationPolicy] = None,
           stop: Optional[StoppingRule] = None,
           backend: Optional[str] = None) -> Tuple[CrState, bool]:
    """Iterate cr_step until the stopping rule holds or max_steps is reached."""
    stop = stop or StoppingRule()
    state = initial_state(phi, policy, backend)

    while True:
        record = state.latest
        if not all(math.isfinite(v) for v in (record.norm_minus, record.norm_plus, record.norm_zero)):
            raise NoConvergence(f"non-finite iterate at step {state.step}",
                                norms_history=list(state.norms_history))
        if _converged(record, stop):
            logger.info(f"Cyclic reduction converged in {state.step} steps "
                        f"({record.elapsed_seconds:.3f}s)")
            return state, True
        if state.step >= stop.max_steps:
            logger.warning(f"Cyclic reduction stopped after {state.step} steps without converging")
            return state, False
        state = cr_step(state)


def telemetry_lines(state: CrState) -> List[str]:
    """'h norm_Aminus norm_Aplus max_offdiag_rank elapsed_seconds' per step."""
    return [record.line() for record in state.norms_history]


def psi_h(state: CrState, z: complex) -> np.ndarray:
    """phi_h(z)^{-1} evaluated densely."""
    phi_h = state.triple.evaluate(z)
    return linalg_kernel.lu_solve(phi_h, np.eye(phi_h.shape[0], dtype=complex))


def psi(phi: LaurentTriple, z: complex) -> np.ndarray:
    value = phi.evaluate(z)
    return linalg_kernel.lu_solve(value, np.eye(phi.m, dtype=complex))


def functional_identity_error(phi: LaurentTriple, state: CrState, z: complex) -> float:
    """
    Relative gap between psi^(h)(z^(2^h)) and the average of psi(xi^j z) over
    the 2^h-th roots of unity xi^j.
    """
    count = 2 ** state.step
    xi = np.exp(2j * np.pi / count)
    average = sum(psi(phi, xi ** j * z) for j in range(count)) / count
    lhs = psi_h(state, z ** count)
    return linalg_kernel.norm2(lhs - average) / max(linalg_kernel.norm2(lhs), np.finfo(float).tiny)


def central_coefficient(state: CrState, raw: bool = False) -> np.ndarray:
    """(lim A_zero^(h))^{-1}, the central Laurent coefficient; raw=True returns the limit itself."""
    limit = state.dense("a_zero")
    if raw:
        return limit.copy()
    return linalg_kernel.lu_solve(limit, np.eye(limit.shape[0]))


@dataclass(frozen=True)
class LaurentCoeffs:
    coeffs: Dict[int, np.ndarray]
    sample_count: int

    def __getitem__(self, j: int) -> np.ndarray:
        return self.coeffs[j]

    @property
    def terms(self) -> int:
        return max(self.coeffs)


def default_sample_count(J: int) -> int:
    """Smallest power of two >= max(64, 8 J)."""
    N = 64
    while N < 8 * J:
        N *= 2
    return N


def laurent_coeffs(phi: LaurentTriple, J: int, N: Optional[int] = None,
                   check_alias: bool = True) -> LaurentCoeffs:
    """
    H_j for -J <= j <= J from N equispaced samples of psi on the unit circle
    (discrete Fourier transform of the samples).
    """
    if J < 0:
        raise ValueError("J must be nonnegative")
    N = N or default_sample_count(J)
    if N < 2 * J + 1:
        warnings.warn(f"{N} samples alias the {2 * J + 1} requested coefficients", AliasWarning)

    points = np.exp(2j * np.pi * np.arange(N) / N)
    samples = np.stack(ordered_map(lambda z: psi(phi, z), points))
    spectrum = scipy.fft.fft(samples, axis=0) / N

    coeffs = {j: spectrum[j % N] for j in range(-J, J + 1)}
    if phi.is_real():
        scale0 = linalg_kernel.norm2(coeffs[0])
        for j, H in coeffs.items():
            imag = linalg_kernel.norm2(H.imag)
            if imag > 1e-10 * max(linalg_kernel.norm2(H.real), scale0):
                logger.warning(f"H_{j} has imaginary part {imag:.3e}; keeping it complex")
                continue
            coeffs[j] = H.real.copy()

    norm0 = linalg_kernel.norm2(coeffs[0])
    if check_alias and J > 0 and norm0 > 0:
        tail = max(linalg_kernel.norm2(coeffs[J]), linalg_kernel.norm2(coeffs[-J])) / norm0
        if tail > 1e-8:
            warnings.warn(f"||H_J|| / ||H_0|| = {tail:.2e} at J={J}; increase J", AliasWarning)
            logger.warning(f"Laurent tail ratio {tail:.2e} exceeds 1e-8 at J={J}")
    return LaurentCoeffs(coeffs, N)


@dataclass(frozen=True)
class QuadraticSolutions:
    """Minimal solutions of the four quadratic matrix equations of phi."""

    G: np.ndarray
    G_hat: np.ndarray
    R: np.ndarray
    R_hat: np.ndarray
    H0: np.ndarray
    state: CrState
    residuals: Dict[str, float]


def quadratic_residuals(phi: LaurentTriple, G, G_hat, R, R_hat) -> Dict[str, float]:
    """Spectral-norm residuals of the four matrix equations."""
    Am, A0, Ap = phi.A_minus, phi.A_zero, phi.A_plus
    norm = linalg_kernel.norm2
    return {
        "G": norm(Ap @ G @ G + A0 @ G + Am),
        "G_hat": norm(Ap + A0 @ G_hat + Am @ G_hat @ G_hat),
        "R": norm(Ap + R @ A0 + R @ R @ Am),
        "R_hat": norm(R_hat @ R_hat @ Ap + R_hat @ A0 + Am),
    }


def _coupling_sample_count(radius: float, J: int) -> Optional[int]:
    if radius <= 0:
        return default_sample_count(J)
    needed = math.log(1e-13) / math.log(radius) + J
    N = 64
    while N < needed:
        N *= 2
    return N if N <= MAX_COUPLING_SAMPLES else None


def check_laurent_couplings(phi: LaurentTriple, solutions: "QuadraticSolutions",
                            J: int = 2, tol: float = 1e-7) -> Optional[Dict[int, float]]:
    """
    Compare H_j with G_hat^j H_0 and H_{-j} with G^j H_0 (and the R/R_hat
    forms) for 1 <= j <= J. Returns the relative errors, or None when the
    splitting is too weak for an affordable sample count.
    """
    radius = max(linalg_kernel.spectral_radius(solutions.G),
                 linalg_kernel.spectral_radius(solutions.G_hat))
    N = _coupling_sample_count(radius, J)
    if N is None:
        logger.warning(f"Skipping Laurent coupling check: spectral radius {radius:.6f} "
                       f"needs more than {MAX_COUPLING_SAMPLES} samples")
        return None

    H = laurent_coeffs(phi, J, N, check_alias=False)
    H0 = H[0]
    scale = max(linalg_kernel.norm2(H0), np.finfo(float).tiny)
    errors = {}
    G_pow = np.eye(phi.m)
    G_hat_pow = np.eye(phi.m)
    R_pow = np.eye(phi.m)
    R_hat_pow = np.eye(phi.m)
    for j in range(1, J + 1):
        G_pow = solutions.G @ G_pow
        G_hat_pow = solutions.G_hat @ G_hat_pow
        R_pow = R_pow @ solutions.R
        R_hat_pow = R_hat_pow @ solutions.R_hat
        gaps = (
            linalg_kernel.norm2(H[-j] - G_pow @ H0),
            linalg_kernel.norm2(H[j] - G_hat_pow @ H0),
            linalg_kernel.norm2(H[j] - H0 @ R_pow),
            linalg_kernel.norm2(H[-j] - H0 @ R_hat_pow),
        )
        errors[j] = max(gaps) / scale
        if errors[j] > tol:
            raise ResidualTooLarge(f"Laurent coupling at j={j} failed", errors[j])
    logger.info(f"Laurent couplings verified with {N} samples, max error {max(errors.values()):.2e}")
    return errors


def solve_quadratic_equations(phi: LaurentTriple, policy: Optional[TruncationPolicy] = None,
                              stop: Optional[StoppingRule] = None,
                              backend: Optional[str] = None,
                              check_coupling: bool = True) -> QuadraticSolutions:
    """
    Minimal solutions from the limits of the hat/tilde sequences:

        G = -A_hat^{-1} A_minus      A_plus X^2 + A_zero X + A_minus = 0
        R = -A_plus A_hat^{-1}       A_plus + X A_zero + X^2 A_minus = 0
        G_hat = -A_tilde^{-1} A_plus     A_plus + A_zero X + A_minus X^2 = 0
        R_hat = -A_minus A_tilde^{-1}    X^2 A_plus + X A_zero + A_minus = 0
    """
    state, converged = run_cr(phi, policy, stop, backend)
    if not converged:
        raise NoConvergence(f"cyclic reduction did not converge in {state.step} steps",
                            norms_history=list(state.norms_history))

    try:
        hat = linalg_kernel.lu_factor(state.dense("a_hat"))
        tilde = linalg_kernel.lu_factor(state.dense("a_tilde"))
    except SingularMatrix as e:
        raise Breakdown(f"limit of an auxiliary sequence is singular: {e}", step=state.step) from e

    G = -hat.solve(phi.A_minus)
    R = -hat.solve(phi.A_plus.T, trans=1).T
    G_hat = -tilde.solve(phi.A_plus)
    R_hat = -tilde.solve(phi.A_minus.T, trans=1).T

    residuals = quadratic_residuals(phi, G, G_hat, R, R_hat)
    bound = 1e-8 * sum(linalg_kernel.norm2(b) for b in (phi.A_minus, phi.A_zero, phi.A_plus))
    for name, value in residuals.items():
        if value > bound:
            raise ResidualTooLarge(f"matrix equation for {name}", value)

    for name, X in (("G", G), ("G_hat", G_hat), ("R", R), ("R_hat", R_hat)):
        radius = linalg_kernel.spectral_radius(X)
        if radius >= 1 + 1e-8:
            raise SpectralRadiusViolation(f"{name} is not the minimal solution", radius)

    solutions = QuadraticSolutions(G=G, G_hat=G_hat, R=R, R_hat=R_hat,
                                   H0=central_coefficient(state), state=state,
                                   residuals=residuals)
    if check_coupling:
        check_laurent_couplings(phi, solutions)
    return solutions
