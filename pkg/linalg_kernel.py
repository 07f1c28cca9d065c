"""
Dense linear-algebra substrate.

Thin, checked wrappers around the LAPACK kernels exposed by scipy.linalg:
LU factor/solve with breakdown detection, thin SVD, QZ generalized
eigenvalues with infinite-eigenvalue classification and the companion
linearization of quadratic matrix polynomials.

All functions are pure; arrays passed in are never modified.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg
from pydantic import BaseModel, Field

from errors import ConvergenceFailure, DomainError, ShapeMismatch, SingularMatrix

logger = logging.getLogger(__name__)

UNIT_ROUNDOFF = np.finfo(float).eps / 2


class NumericSettings(BaseModel):
    """Global thresholds used by the dense kernels."""

    # pivot threshold = factor * u * ||A||_inf * rows
    pivot_threshold_factor: float = Field(1.0, ge=0.0)
    # |beta| <= tol * |alpha| marks an infinite generalized eigenvalue
    infinite_eig_tol: float = Field(1e-13, gt=0.0)
    # max |Q^H Q - I| allowed per row of the larger SVD dimension
    svd_orthogonality_tol: float = Field(1e-12, gt=0.0)


settings = NumericSettings()


def configure(**overrides) -> NumericSettings:
    """Replace the global numeric settings (validated) and return them."""
    global settings
    settings = NumericSettings(**{**settings.model_dump(), **overrides})
    logger.debug(f"Numeric settings: {settings.model_dump()}")
    return settings


def as_dense(A, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D finite array; vectors become single columns."""
    A = np.asarray(A)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ShapeMismatch(f"{name} must be two-dimensional, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DomainError(f"{name} has non-finite entries")
    return A


def norm2(A: np.ndarray) -> float:
    """Spectral norm; zero for empty matrices."""
    A = np.asarray(A)
    if A.size == 0:
        return 0.0
    return float(np.linalg.norm(A, 2))


@dataclass(frozen=True)
class LuFactor:
    """Partial-pivoting LU factors of a square matrix."""

    lu: np.ndarray
    piv: np.ndarray

    @property
    def size(self) -> int:
        return self.lu.shape[0]

    def solve(self, B: np.ndarray, trans: int = 0) -> np.ndarray:
        B = np.asarray(B)
        if B.shape[0] != self.size:
            raise ShapeMismatch(f"right-hand side has {B.shape[0]} rows, expected {self.size}")
        if self.size == 0:
            return np.zeros(B.shape, dtype=np.result_type(self.lu, B))
        return scipy.linalg.lu_solve((self.lu, self.piv), B, trans=trans, check_finite=False)


def pivot_threshold(A: np.ndarray) -> float:
    rows = A.shape[0]
    scale = np.linalg.norm(A, np.inf) if A.size else 0.0
    return settings.pivot_threshold_factor * UNIT_ROUNDOFF * scale * rows


def lu_factor(A) -> LuFactor:
    """Factor a square matrix; raise SingularMatrix on a tiny pivot."""
    A = as_dense(A, "A")
    rows, cols = A.shape
    if rows != cols:
        raise ShapeMismatch(f"lu_factor needs a square matrix, got {A.shape}")
    if rows == 0:
        return LuFactor(np.zeros((0, 0), dtype=A.dtype), np.zeros(0, dtype=np.int32))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=False)

    pivots = np.abs(np.diag(lu))
    threshold = pivot_threshold(A)
    smallest = float(pivots.min())
    if smallest <= threshold or not np.isfinite(smallest):
        raise SingularMatrix(
            f"pivot {smallest:.3e} below threshold {threshold:.3e}", pivot=smallest
        )
    return LuFactor(lu, piv)


def lu_solve(A, B) -> np.ndarray:
    """Solve A X = B with partial pivoting."""
    A = as_dense(A, "A")
    B = np.asarray(B)
    vector = B.ndim == 1
    B = as_dense(B, "B")
    if B.shape[0] != A.shape[0]:
        raise ShapeMismatch(f"B has {B.shape[0]} rows, A has {A.shape[0]}")
    X = lu_factor(A).solve(B)
    return X[:, 0] if vector else X


def _orthonormal_factors(U: np.ndarray, Vh: np.ndarray) -> bool:
    limit = settings.svd_orthogonality_tol * max(U.shape[0], Vh.shape[1])
    return orthonormality_defect(U) <= limit and orthonormality_defect(Vh.conj().T) <= limit


def svd(A) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD A = U diag(S) V^H with S nonincreasing and U, V orthonormal."""
    A = np.asarray(A)
    if A.ndim != 2:
        raise ShapeMismatch(f"svd needs a matrix, got shape {A.shape}")
    rows, cols = A.shape
    k = min(rows, cols)
    if k == 0:
        return np.zeros((rows, 0), A.dtype), np.zeros(0), np.zeros((cols, 0), A.dtype)

    try:
        U, S, Vh = scipy.linalg.svd(A, full_matrices=False, check_finite=False)
        retry = not _orthonormal_factors(U, Vh)
        if retry:
            logger.warning("gesdd factors lost orthonormality, retrying with gesvd")
    except np.linalg.LinAlgError:
        logger.warning("gesdd failed, retrying with gesvd")
        retry = True
    if retry:
        try:
            U, S, Vh = scipy.linalg.svd(
                A, full_matrices=False, check_finite=False, lapack_driver="gesvd"
            )
        except np.linalg.LinAlgError as e:
            raise ConvergenceFailure(f"SVD did not converge: {e}") from e
        if not _orthonormal_factors(U, Vh):
            raise ConvergenceFailure(
                f"SVD factors not orthonormal within {settings.svd_orthogonality_tol:g} per row"
            )

    if np.any(np.diff(S) > 0):
        raise ConvergenceFailure("SVD returned unordered singular values")
    return U, S, Vh.conj().T


def singular_values(A) -> np.ndarray:
    A = np.asarray(A)
    if A.size == 0:
        return np.zeros(0)
    try:
        return scipy.linalg.svdvals(A, check_finite=False)
    except np.linalg.LinAlgError as e:
        raise ConvergenceFailure(f"SVD did not converge: {e}") from e


def generalized_eigvals(M, N) -> np.ndarray:
    """
    Eigenvalues of the pencil M - lambda N.

    Infinite eigenvalues are returned as complex(inf, 0); the result always
    has as many entries as the pencil size.
    """
    M = as_dense(M, "M")
    N = as_dense(N, "N")
    if M.shape != N.shape or M.shape[0] != M.shape[1]:
        raise ShapeMismatch(f"pencil needs equal square matrices, got {M.shape} and {N.shape}")
    if M.shape[0] == 0:
        return np.zeros(0, dtype=complex)

    try:
        alpha, beta = scipy.linalg.eigvals(M, N, homogeneous_eigvals=True, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise ConvergenceFailure(f"QZ iteration failed: {e}") from e

    alpha = np.asarray(alpha, dtype=complex)
    beta = np.asarray(beta, dtype=complex)
    infinite = np.abs(beta) <= settings.infinite_eig_tol * np.abs(alpha)
    degenerate = (np.abs(alpha) == 0) & (np.abs(beta) == 0)
    if np.any(degenerate):
        logger.warning(f"Singular pencil: {int(degenerate.sum())} indeterminate eigenvalues reported as infinite")
        infinite |= degenerate

    values = np.empty(alpha.shape, dtype=complex)
    finite = ~infinite
    values[finite] = alpha[finite] / beta[finite]
    values[infinite] = complex(np.inf, 0.0)
    return values


def companion_pencil(A_minus, A_zero, A_plus) -> Tuple[np.ndarray, np.ndarray]:
    """
    Linearize A_minus + z A_zero + z^2 A_plus as the pencil
    ([[0, I], [-A_minus, -A_zero]], diag(I, A_plus)).
    """
    A_minus = as_dense(A_minus, "A_minus")
    A_zero = as_dense(A_zero, "A_zero")
    A_plus = as_dense(A_plus, "A_plus")
    m = A_zero.shape[0]
    if not (A_minus.shape == A_zero.shape == A_plus.shape == (m, m)):
        raise ShapeMismatch("companion_pencil needs three square blocks of equal size")

    dtype = np.result_type(A_minus, A_zero, A_plus)
    eye = np.eye(m, dtype=dtype)
    zero = np.zeros((m, m), dtype=dtype)
    M = np.block([[zero, eye], [-A_minus, -A_zero]])
    N = np.block([[eye, zero], [zero, A_plus]])
    return M, N


def eigvecs_condition(X) -> Tuple[np.ndarray, float]:
    """
    Eigenvalues of X and the spectral condition number of its eigenvector
    matrix. Symmetric input is diagonalized orthogonally (condition 1).
    """
    X = as_dense(X, "X")
    if X.shape[0] == 0:
        return np.zeros(0), 1.0
    if np.isrealobj(X) and np.allclose(X, X.T, rtol=1e-12, atol=1e-14 * max(norm2(X), 1e-300)):
        values = scipy.linalg.eigvalsh((X + X.T) / 2)
        return values.astype(complex), 1.0

    values, vectors = scipy.linalg.eig(X, check_finite=False)
    condition = float(np.linalg.cond(vectors, 2))
    return values, condition


def spectral_radius(X) -> float:
    X = np.asarray(X)
    if X.size == 0:
        return 0.0
    return float(np.max(np.abs(scipy.linalg.eigvals(X, check_finite=False))))


def orthonormality_defect(Q: np.ndarray) -> float:
    """max |Q^H Q - I|."""
    if Q.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(Q.conj().T @ Q - np.eye(Q.shape[1]))))


def random_orthogonal(n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian matrix)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))
