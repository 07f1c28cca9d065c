"""
Block arithmetic backends shared by cyclic reduction and the QCR solver.

Both backends expose the same small set of operations on m x m blocks so the
recurrences are written once: ``DenseBackend`` works on numpy arrays and
``HodlrBackend`` on HodlrMatrix trees with recompression at every level.
"""

import logging
from typing import Optional, Union

import numpy as np

import hodlr
import linalg_kernel
from hodlr import HodlrMatrix, TruncationPolicy

logger = logging.getLogger(__name__)

Block = Union[np.ndarray, HodlrMatrix]


class DenseFactor:
    """Applies A^{-1} from either side using one LU factorization."""

    def __init__(self, A: np.ndarray):
        self.lu = linalg_kernel.lu_factor(A)

    def ldiv(self, X: np.ndarray) -> np.ndarray:
        return self.lu.solve(X)

    def rdiv(self, X: np.ndarray) -> np.ndarray:
        return self.lu.solve(X.T, trans=1).T

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.lu.solve(b)


class HodlrFactor:
    """Structured inverse of a HODLR block, reused for every application."""

    def __init__(self, A: HodlrMatrix, policy: TruncationPolicy):
        self.policy = policy
        self.inv = hodlr.inverse(A, policy)

    def ldiv(self, X: HodlrMatrix) -> HodlrMatrix:
        return hodlr.matmul(self.inv, X, self.policy)

    def rdiv(self, X: HodlrMatrix) -> HodlrMatrix:
        return hodlr.matmul(X, self.inv, self.policy)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return hodlr.dot(self.inv, b)


class DenseBackend:
    name = "dense"

    def convert(self, A) -> np.ndarray:
        if isinstance(A, HodlrMatrix):
            return hodlr.to_dense(A)
        return np.array(linalg_kernel.as_dense(A), dtype=float)

    def to_dense(self, A: np.ndarray) -> np.ndarray:
        return np.asarray(A)

    def mul(self, A, B):
        return A @ B

    def add(self, A, B):
        return A + B

    def sub(self, A, B):
        return A - B

    def neg(self, A):
        return -A

    def scale(self, A, s):
        return A * s

    def matvec(self, A, x: np.ndarray) -> np.ndarray:
        return A @ x

    def factor(self, A) -> DenseFactor:
        return DenseFactor(A)

    def norm(self, A) -> float:
        return linalg_kernel.norm2(A)

    def max_rank(self, A) -> Optional[int]:
        return None


class HodlrBackend:
    name = "hodlr"

    def __init__(self, policy: Optional[TruncationPolicy] = None):
        self.policy = policy or TruncationPolicy()

    def convert(self, A) -> HodlrMatrix:
        if isinstance(A, HodlrMatrix):
            return A
        return hodlr.from_dense(np.asarray(A, dtype=float), self.policy)

    def to_dense(self, A: HodlrMatrix) -> np.ndarray:
        return hodlr.to_dense(A)

    def mul(self, A, B):
        return hodlr.matmul(A, B, self.policy)

    def add(self, A, B):
        return hodlr.add(A, B, self.policy)

    def sub(self, A, B):
        return hodlr.subtract(A, B, self.policy)

    def neg(self, A):
        return hodlr.scale(A, -1.0)

    def scale(self, A, s):
        return hodlr.scale(A, s)

    def matvec(self, A, x: np.ndarray) -> np.ndarray:
        return hodlr.dot(A, x)

    def factor(self, A) -> HodlrFactor:
        return HodlrFactor(A, self.policy)

    def norm(self, A) -> float:
        return hodlr.norm2(A)

    def max_rank(self, A) -> Optional[int]:
        return hodlr.max_offdiag_rank(A)


def make_backend(name="dense", policy: Optional[TruncationPolicy] = None):
    """Backend by name: 'dense' or 'hodlr'. Backend objects pass through."""
    if not isinstance(name, str):
        return name
    if name == "dense":
        return DenseBackend()
    if name == "hodlr":
        return HodlrBackend(policy)
    raise ValueError(f"unknown backend {name!r}, expected 'dense' or 'hodlr'")
