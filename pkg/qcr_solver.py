"""
Block tridiagonal block-Toeplitz solver.

Solves trid_n(B, A, C) x = b, i.e. B x_{i-1} + A x_i + C x_{i+1} = b_i, by
odd-even cyclic reduction. Each level eliminates the odd-numbered unknowns,
recurses on the half-size system of even unknowns and recovers the odd ones
by back substitution. The blocks of every level stay in the backend's format
(dense arrays or HODLR trees recompressed at each level).

n = 2^k - 1 is required for the reduction; other sizes go through the dense
block-Thomas elimination with a FallbackWarning.
"""

import logging
import time
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

import hodlr
import linalg_kernel
from block_backend import make_backend
from errors import Breakdown, FallbackWarning, ResidualTooLarge, ShapeMismatch, SingularMatrix, UnsupportedSize
from hodlr import HodlrMatrix, TruncationPolicy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockTridToeplitzSystem:
    """Sub-diagonal B, diagonal A, super-diagonal C and rhs of shape (n, m)."""

    B: object
    A: object
    C: object
    rhs: np.ndarray

    def __post_init__(self):
        rhs = np.asarray(self.rhs, dtype=float)
        if rhs.ndim == 1:
            rhs = rhs[:, None]
        object.__setattr__(self, "rhs", rhs)
        if rhs.ndim != 2 or rhs.shape[0] < 1:
            raise ShapeMismatch(f"rhs must hold n >= 1 blocks, got shape {rhs.shape}")
        m = rhs.shape[1]
        for name in ("B", "A", "C"):
            block = getattr(self, name)
            if not isinstance(block, HodlrMatrix):
                block = linalg_kernel.as_dense(block, name)
                object.__setattr__(self, name, block)
            if block.shape != (m, m):
                raise ShapeMismatch(f"block {name} has shape {block.shape}, expected {(m, m)}")

    @property
    def n(self) -> int:
        return self.rhs.shape[0]

    @property
    def m(self) -> int:
        return self.rhs.shape[1]

    def dense_blocks(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(hodlr.to_dense(b) if isinstance(b, HodlrMatrix) else b
                     for b in (self.B, self.A, self.C))


@dataclass(frozen=True)
class ReductionData:
    """What back substitution needs from one reduction level."""

    factor: object
    B: object
    C: object
    backend: object
    rhs_odd: np.ndarray


@dataclass(frozen=True)
class QcrSolution:
    x: np.ndarray
    relative_residual: float
    levels: int
    max_offdiag_rank: Optional[int]
    fallback: bool
    seconds: float


def is_fast_size(n: int) -> bool:
    """n = 2^k - 1."""
    return n >= 1 and (n + 1) & n == 0


def _apply(block, X: np.ndarray) -> np.ndarray:
    if isinstance(block, HodlrMatrix):
        return hodlr.dot(block, X)
    return block @ X


def block_matvec(sys: BlockTridToeplitzSystem, x) -> np.ndarray:
    """The block tridiagonal operator applied to x of shape (n, m)."""
    X = np.asarray(x, dtype=float).reshape(sys.n, sys.m).T
    zero = np.zeros((sys.m, 1))
    left = np.hstack([zero, X[:, :-1]])
    right = np.hstack([X[:, 1:], zero])
    Y = _apply(sys.A, X) + _apply(sys.B, left) + _apply(sys.C, right)
    return Y.T


def residual(sys: BlockTridToeplitzSystem, x) -> float:
    """||Ax - b|| / (||A|| ||x|| + ||b||), with ||A|| <= ||A|| + ||B|| + ||C|| over the blocks."""
    x = np.asarray(x, dtype=float).reshape(sys.n, sys.m)
    gap = np.linalg.norm(block_matvec(sys, x) - sys.rhs)
    op_norm = sum(linalg_kernel.norm2(b) for b in sys.dense_blocks())
    denominator = op_norm * np.linalg.norm(x) + np.linalg.norm(sys.rhs)
    return float(gap / denominator) if denominator > 0 else float(gap)


def to_dense(sys: BlockTridToeplitzSystem) -> np.ndarray:
    """The mn x mn matrix, for oracle comparisons on small sizes."""
    B, A, C = sys.dense_blocks()
    n = sys.n
    return (np.kron(np.eye(n), A) + np.kron(np.eye(n, k=-1), B)
            + np.kron(np.eye(n, k=1), C))


def dense_block_solve(sys: BlockTridToeplitzSystem) -> np.ndarray:
    """Block-Thomas elimination, O(n m^3); used for sizes other than 2^k - 1."""
    B, A, C = sys.dense_blocks()
    n, m = sys.n, sys.m
    upper = np.zeros((n, m, m))
    d = np.zeros((n, m))
    pivot = A
    for i in range(n):
        if i > 0:
            pivot = A - B @ upper[i - 1]
        try:
            factor = linalg_kernel.lu_factor(pivot)
        except SingularMatrix as e:
            raise Breakdown(f"block elimination pivot singular: {e}", step=i) from e
        rhs_i = sys.rhs[i] - (B @ d[i - 1] if i > 0 else 0.0)
        upper[i] = factor.solve(C)
        d[i] = factor.solve(rhs_i)

    x = np.zeros((n, m))
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - upper[i] @ x[i + 1]
    return x


def reduce_step(sys: BlockTridToeplitzSystem, policy: Optional[TruncationPolicy] = None,
                backend="dense", level: int = 0) -> Tuple[BlockTridToeplitzSystem, ReductionData]:
    """
    Eliminate the odd unknowns of an odd-size system:

        A' = A - B A^{-1} C - C A^{-1} B,  B' = -B A^{-1} B,  C' = -C A^{-1} C
        b'_i = b_{2i} - B A^{-1} b_{2i-1} - C A^{-1} b_{2i+1}
    """
    ops = make_backend(backend, policy)
    if sys.n % 2 == 0:
        raise UnsupportedSize(f"odd-even reduction needs an odd block count, got {sys.n}")
    A, B, C = ops.convert(sys.A), ops.convert(sys.B), ops.convert(sys.C)
    try:
        factor = ops.factor(A)
    except SingularMatrix as e:
        raise Breakdown(f"diagonal block singular: {e}", step=level) from e

    b_s = factor.rdiv(B)
    c_s = factor.rdiv(C)
    A_new = ops.sub(ops.sub(A, ops.mul(b_s, C)), ops.mul(c_s, B))
    B_new = ops.neg(ops.mul(b_s, B))
    C_new = ops.neg(ops.mul(c_s, C))

    # columns are blocks: rhs_odd[:, j] = b_{2j+1} in 1-based numbering
    rhs_odd = sys.rhs[0::2].T
    rhs_even = sys.rhs[1::2].T
    solved_odd = factor.solve(rhs_odd)
    rhs_new = (rhs_even - ops.matvec(B, solved_odd[:, :-1])
               - ops.matvec(C, solved_odd[:, 1:]))

    inner = BlockTridToeplitzSystem(B_new, A_new, C_new, rhs_new.T)
    return inner, ReductionData(factor, B, C, ops, rhs_odd)


def back_substitute(back: ReductionData, x_even) -> np.ndarray:
    """
    Odd unknowns from the even ones:

        x_1 = A^{-1}(b_1 - C x_2)
        x_i = A^{-1}(b_i - B x_{i-1} - C x_{i+1})
        x_n = A^{-1}(b_n - B x_{n-1})
    """
    X_even = np.asarray(x_even, dtype=float).reshape(-1, back.rhs_odd.shape[0]).T
    zero = np.zeros((back.rhs_odd.shape[0], 1))
    previous = np.hstack([zero, X_even])
    following = np.hstack([X_even, zero])
    rhs = back.rhs_odd - back.backend.matvec(back.B, previous) - back.backend.matvec(back.C, following)
    return back.factor.solve(rhs).T


def _interleave(x_odd: np.ndarray, x_even: np.ndarray) -> np.ndarray:
    x = np.empty((x_odd.shape[0] + x_even.shape[0], x_odd.shape[1]))
    x[0::2] = x_odd
    x[1::2] = x_even
    return x


def _solve_recursive(sys: BlockTridToeplitzSystem, ops, level: int, stats: dict) -> np.ndarray:
    if ops.max_rank(sys.A) is not None:
        ranks = [ops.max_rank(b) for b in (sys.A, sys.B, sys.C)]
        stats["max_rank"] = max(stats["max_rank"] or 0, *ranks)
    if sys.n == 1:
        try:
            factor = ops.factor(sys.A)
        except SingularMatrix as e:
            raise Breakdown(f"diagonal block singular: {e}", step=level) from e
        return factor.solve(sys.rhs.T).T

    inner, back = reduce_step(sys, backend=ops, level=level)
    stats["levels"] = level + 1
    logger.debug(f"QCR level {level + 1}: {inner.n} blocks remain")
    x_even = _solve_recursive(inner, ops, level + 1, stats)
    return _interleave(back_substitute(back, x_even), x_even)


def default_tolerance(backend: str, policy: Optional[TruncationPolicy]) -> float:
    if backend == "hodlr":
        return 100 * (policy or TruncationPolicy()).rel_tol
    return 1e-10


def solve(sys: BlockTridToeplitzSystem, policy: Optional[TruncationPolicy] = None,
          backend: str = "dense", tol_res: Optional[float] = None,
          allow_fallback: bool = True) -> QcrSolution:
    """Solve the system and verify the relative residual against tol_res."""
    tol_res = tol_res if tol_res is not None else default_tolerance(backend, policy)
    started = time.perf_counter()
    stats = {"levels": 0, "max_rank": None}
    fallback = not is_fast_size(sys.n)

    if fallback:
        if not allow_fallback:
            raise UnsupportedSize(f"n={sys.n} is not of the form 2^k - 1")
        warnings.warn(f"n={sys.n} is not 2^k - 1; using dense block elimination", FallbackWarning)
        logger.warning(f"Dense fallback for n={sys.n}, m={sys.m}")
        x = dense_block_solve(sys)
    else:
        ops = make_backend(backend, policy)
        converted = BlockTridToeplitzSystem(ops.convert(sys.B), ops.convert(sys.A),
                                            ops.convert(sys.C), sys.rhs)
        x = _solve_recursive(converted, ops, 0, stats)

    seconds = time.perf_counter() - started
    rel = residual(sys, x)
    logger.info(f"QCR n={sys.n} m={sys.m} backend={backend} levels={stats['levels']} "
                f"residual={rel:.3e} time={seconds:.3f}s")
    if rel > tol_res:
        raise ResidualTooLarge(f"block tridiagonal solve n={sys.n} m={sys.m}", rel)
    return QcrSolution(x=x, relative_residual=rel, levels=stats["levels"],
                       max_offdiag_rank=stats["max_rank"], fallback=fallback, seconds=seconds)
