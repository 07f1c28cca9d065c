"""
HODLR (hierarchically off-diagonal low-rank) matrices.

A square matrix of size m is split into a top-left block of size m // 2 and a
bottom-right block of size m - m // 2; the diagonal blocks are split again
until they reach ``leaf_size`` and are stored densely. The two off-diagonal
blocks of every node are stored as factor pairs ``U @ V.T`` in normal form:
``U`` has orthonormal columns and ``V`` carries the singular values.

Every arithmetic routine recompresses the off-diagonal factors it produces at
each level of the tree, so ranks stay at the size the truncation policy allows.

Usage:
    policy = TruncationPolicy(rel_tol=1e-12, leaf_size=32)
    H = from_dense(A, policy)
    X = factorize(H, policy).solve(B)
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.sparse.linalg import LinearOperator, svds

import linalg_kernel
from errors import BadBlockIndex, ShapeMismatch

logger = logging.getLogger(__name__)

# below this size norm2 materializes the matrix instead of running svds
DENSE_NORM_LIMIT = 256


class TruncationPolicy(BaseModel):
    """Cutoff for off-diagonal singular values: max(abs_tol, rel_tol * scale), plus a rank cap."""

    rel_tol: float = Field(1e-12, ge=0.0)
    abs_tol: float = Field(0.0, ge=0.0)
    max_rank: Optional[int] = Field(None, ge=0)
    leaf_size: int = Field(32, ge=1)

    @model_validator(mode="after")
    def _one_criterion_active(self):
        if self.rel_tol == 0 and self.abs_tol == 0 and self.max_rank is None:
            raise ValueError("truncation policy needs rel_tol, abs_tol or max_rank")
        return self

    def cutoff(self, scale: float) -> float:
        return max(self.abs_tol, self.rel_tol * scale)

    def keep(self, singular_values: np.ndarray, scale: float) -> int:
        """Number of leading singular values that survive truncation."""
        k = int(np.count_nonzero(singular_values > self.cutoff(scale)))
        if self.max_rank is not None:
            k = min(k, self.max_rank)
        return k


@dataclass(frozen=True, eq=False)
class HodlrMatrix:
    """Immutable HODLR tree node; either a dense leaf or a 2x2 block split."""

    size: int
    leaf_size: int
    dense: Optional[np.ndarray] = None
    a11: Optional["HodlrMatrix"] = None
    a22: Optional["HodlrMatrix"] = None
    u12: Optional[np.ndarray] = None
    v12: Optional[np.ndarray] = None
    u21: Optional[np.ndarray] = None
    v21: Optional[np.ndarray] = None

    @property
    def is_leaf(self) -> bool:
        return self.dense is not None

    @property
    def split(self) -> int:
        return self.size // 2

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.size, self.size)

    @property
    def dtype(self):
        if self.is_leaf:
            return self.dense.dtype
        return np.result_type(self.a11.dtype, self.a22.dtype, self.v12.dtype, self.v21.dtype)

    def __neg__(self) -> "HodlrMatrix":
        return scale(self, -1.0)

    def __mul__(self, s) -> "HodlrMatrix":
        return scale(self, s)

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, HodlrMatrix):
            return NotImplemented
        return dot(self, other)

    def to_dense(self) -> np.ndarray:
        return to_dense(self)


def _is_leaf_size(size: int, leaf_size: int) -> bool:
    return size <= leaf_size or size < 2


def _node(size, leaf_size, a11, a22, u12, v12, u21, v21) -> HodlrMatrix:
    return HodlrMatrix(size=size, leaf_size=leaf_size, a11=a11, a22=a22,
                       u12=u12, v12=v12, u21=u21, v21=v21)


def _leaf(dense: np.ndarray, leaf_size: int) -> HodlrMatrix:
    return HodlrMatrix(size=dense.shape[0], leaf_size=leaf_size, dense=dense)


def _empty_factors(rows: int, cols: int, dtype=float) -> Tuple[np.ndarray, np.ndarray]:
    return np.zeros((rows, 0), dtype=dtype), np.zeros((cols, 0), dtype=dtype)


def recompress(U: np.ndarray, V: np.ndarray, policy: TruncationPolicy,
               scale: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Truncate the low-rank product U @ V.T and return it in normal form.

    QR of both factors followed by an SVD of the small core. ``scale`` is the
    reference for rel_tol; the largest singular value of the product when None.
    """
    rows, cols = U.shape[0], V.shape[0]
    if U.shape[1] != V.shape[1]:
        raise ShapeMismatch(f"factor inner dimensions differ: {U.shape[1]} vs {V.shape[1]}")
    if U.shape[1] == 0 or rows == 0 or cols == 0:
        return _empty_factors(rows, cols, np.result_type(U, V))

    Qu, Ru = np.linalg.qr(U)
    Qv, Rv = np.linalg.qr(V)
    W, s, Z = linalg_kernel.svd(Ru @ Rv.T)
    reference = s[0] if scale is None else scale
    k = policy.keep(s, reference)
    return Qu @ W[:, :k], Qv @ (Z[:, :k].conj() * s[:k])


def _compress_block(block: np.ndarray, policy: TruncationPolicy,
                    scale: float) -> Tuple[np.ndarray, np.ndarray]:
    U, s, V = linalg_kernel.svd(block)
    k = policy.keep(s, scale)
    return U[:, :k], V[:, :k] * s[:k]


def from_dense(A, policy: Optional[TruncationPolicy] = None,
               leaf_size: Optional[int] = None) -> HodlrMatrix:
    """Compress a dense square matrix; the rel_tol reference is ||A||_2."""
    policy = policy or TruncationPolicy()
    leaf_size = leaf_size or policy.leaf_size
    A = linalg_kernel.as_dense(A, "A")
    if A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"HODLR matrices are square, got {A.shape}")

    global_scale = linalg_kernel.norm2(A)

    def build(block: np.ndarray) -> HodlrMatrix:
        m = block.shape[0]
        if _is_leaf_size(m, leaf_size):
            return _leaf(block.copy(), leaf_size)
        h = m // 2
        u12, v12 = _compress_block(block[:h, h:], policy, global_scale)
        u21, v21 = _compress_block(block[h:, :h], policy, global_scale)
        return _node(m, leaf_size, build(block[:h, :h]), build(block[h:, h:]),
                     u12, v12, u21, v21)

    return build(A)


def identity(size: int, leaf_size: int = 32, dtype=float) -> HodlrMatrix:
    return _diagonal(np.ones(size, dtype=dtype), leaf_size)


def zeros(size: int, leaf_size: int = 32, dtype=float) -> HodlrMatrix:
    return _diagonal(np.zeros(size, dtype=dtype), leaf_size)


def _diagonal(d: np.ndarray, leaf_size: int) -> HodlrMatrix:
    m = d.shape[0]
    if _is_leaf_size(m, leaf_size):
        return _leaf(np.diag(d), leaf_size)
    h = m // 2
    u12, v12 = _empty_factors(h, m - h, d.dtype)
    u21, v21 = _empty_factors(m - h, h, d.dtype)
    return _node(m, leaf_size, _diagonal(d[:h], leaf_size), _diagonal(d[h:], leaf_size),
                 u12, v12, u21, v21)


def to_dense(H: HodlrMatrix) -> np.ndarray:
    if H.is_leaf:
        return H.dense.copy()
    h = H.split
    out = np.empty(H.shape, dtype=H.dtype)
    out[:h, :h] = to_dense(H.a11)
    out[h:, h:] = to_dense(H.a22)
    out[:h, h:] = H.u12 @ H.v12.T
    out[h:, :h] = H.u21 @ H.v21.T
    return out


def _check_congruent(Ha: HodlrMatrix, Hb: HodlrMatrix):
    if Ha.size != Hb.size or Ha.leaf_size != Hb.leaf_size:
        raise ShapeMismatch(
            f"HODLR trees differ: size {Ha.size}/{Hb.size}, leaf {Ha.leaf_size}/{Hb.leaf_size}"
        )


def truncate(H: HodlrMatrix, policy: TruncationPolicy) -> HodlrMatrix:
    """
    Re-truncate every off-diagonal block. Blocks whose rank would not change
    are kept as they are, so a loose policy returns an identical structure.
    """
    if H.is_leaf:
        return H

    def cut(U, V):
        Ut, Vt = recompress(U, V, policy)
        if Ut.shape[1] == U.shape[1]:
            return U, V
        return Ut, Vt

    u12, v12 = cut(H.u12, H.v12)
    u21, v21 = cut(H.u21, H.v21)
    return _node(H.size, H.leaf_size, truncate(H.a11, policy), truncate(H.a22, policy),
                 u12, v12, u21, v21)


def scale(H: HodlrMatrix, s) -> HodlrMatrix:
    """Exact scalar multiple; the weights live in V so U stays orthonormal."""
    if H.is_leaf:
        return _leaf(H.dense * s, H.leaf_size)
    return _node(H.size, H.leaf_size, scale(H.a11, s), scale(H.a22, s),
                 H.u12, H.v12 * s, H.u21, H.v21 * s)


def add(Ha: HodlrMatrix, Hb: HodlrMatrix, policy: TruncationPolicy) -> HodlrMatrix:
    _check_congruent(Ha, Hb)
    if Ha.is_leaf:
        return _leaf(Ha.dense + Hb.dense, Ha.leaf_size)
    # rel_tol is measured against the summands so cancellation truncates to zero
    scale12 = max(linalg_kernel.norm2(Ha.v12), linalg_kernel.norm2(Hb.v12))
    scale21 = max(linalg_kernel.norm2(Ha.v21), linalg_kernel.norm2(Hb.v21))
    u12, v12 = recompress(np.hstack([Ha.u12, Hb.u12]), np.hstack([Ha.v12, Hb.v12]), policy, scale12)
    u21, v21 = recompress(np.hstack([Ha.u21, Hb.u21]), np.hstack([Ha.v21, Hb.v21]), policy, scale21)
    return _node(Ha.size, Ha.leaf_size, add(Ha.a11, Hb.a11, policy), add(Ha.a22, Hb.a22, policy),
                 u12, v12, u21, v21)


def subtract(Ha: HodlrMatrix, Hb: HodlrMatrix, policy: TruncationPolicy) -> HodlrMatrix:
    return add(Ha, scale(Hb, -1.0), policy)


def add_lowrank(H: HodlrMatrix, U: np.ndarray, V: np.ndarray,
                policy: TruncationPolicy) -> HodlrMatrix:
    """H + U @ V.T, splitting the update down the tree."""
    if U.shape[0] != H.size or V.shape[0] != H.size or U.shape[1] != V.shape[1]:
        raise ShapeMismatch(f"low-rank update {U.shape} x {V.shape} does not fit size {H.size}")
    if U.shape[1] == 0:
        return H
    if H.is_leaf:
        return _leaf(H.dense + U @ V.T, H.leaf_size)

    h = H.split
    U1, U2 = U[:h], U[h:]
    V1, V2 = V[:h], V[h:]
    u12, v12 = recompress(np.hstack([H.u12, U1]), np.hstack([H.v12, V2]), policy)
    u21, v21 = recompress(np.hstack([H.u21, U2]), np.hstack([H.v21, V1]), policy)
    return _node(H.size, H.leaf_size,
                 add_lowrank(H.a11, U1, V1, policy), add_lowrank(H.a22, U2, V2, policy),
                 u12, v12, u21, v21)


def dot(H: HodlrMatrix, X) -> np.ndarray:
    """H @ X for a dense vector or block of columns."""
    X = np.asarray(X)
    vector = X.ndim == 1
    if vector:
        X = X[:, None]
    if X.shape[0] != H.size:
        raise ShapeMismatch(f"cannot multiply size {H.size} HODLR by {X.shape[0]} rows")
    Y = _dot(H, X)
    return Y[:, 0] if vector else Y


def _dot(H: HodlrMatrix, X: np.ndarray) -> np.ndarray:
    if H.is_leaf:
        return H.dense @ X
    h = H.split
    X1, X2 = X[:h], X[h:]
    top = _dot(H.a11, X1) + H.u12 @ (H.v12.T @ X2)
    bottom = H.u21 @ (H.v21.T @ X1) + _dot(H.a22, X2)
    return np.vstack([top, bottom])


def rdot(H: HodlrMatrix, X) -> np.ndarray:
    """H.T @ X."""
    X = np.asarray(X)
    vector = X.ndim == 1
    if vector:
        X = X[:, None]
    if X.shape[0] != H.size:
        raise ShapeMismatch(f"cannot multiply size {H.size} HODLR by {X.shape[0]} rows")
    Y = _rdot(H, X)
    return Y[:, 0] if vector else Y


def _rdot(H: HodlrMatrix, X: np.ndarray) -> np.ndarray:
    if H.is_leaf:
        return H.dense.T @ X
    h = H.split
    X1, X2 = X[:h], X[h:]
    top = _rdot(H.a11, X1) + H.v21 @ (H.u21.T @ X2)
    bottom = H.v12 @ (H.u12.T @ X1) + _rdot(H.a22, X2)
    return np.vstack([top, bottom])


def matmul(Ha: HodlrMatrix, Hb: Union[HodlrMatrix, np.ndarray],
           policy: TruncationPolicy) -> Union[HodlrMatrix, np.ndarray]:
    """Product of two congruent HODLR matrices, recompressed at every level."""
    if not isinstance(Hb, HodlrMatrix):
        return dot(Ha, Hb)
    _check_congruent(Ha, Hb)
    if Ha.is_leaf:
        return _leaf(Ha.dense @ Hb.dense, Ha.leaf_size)

    c11 = add_lowrank(matmul(Ha.a11, Hb.a11, policy),
                      Ha.u12, Hb.v21 @ (Hb.u21.T @ Ha.v12), policy)
    c22 = add_lowrank(matmul(Ha.a22, Hb.a22, policy),
                      Ha.u21, Hb.v12 @ (Hb.u12.T @ Ha.v21), policy)
    u12, v12 = recompress(np.hstack([_dot(Ha.a11, Hb.u12), Ha.u12]),
                          np.hstack([Hb.v12, _rdot(Hb.a22, Ha.v12)]), policy)
    u21, v21 = recompress(np.hstack([Ha.u21, _dot(Ha.a22, Hb.u21)]),
                          np.hstack([_rdot(Hb.a11, Ha.v21), Hb.v21]), policy)
    return _node(Ha.size, Ha.leaf_size, c11, c22, u12, v12, u21, v21)


def inverse(H: HodlrMatrix, policy: TruncationPolicy) -> HodlrMatrix:
    """
    Recursive 2x2 block inversion through the Schur complement of the
    top-left block. Raises SingularMatrix when a leaf pivot breaks down.
    """
    if H.is_leaf:
        factor = linalg_kernel.lu_factor(H.dense)
        return _leaf(factor.solve(np.eye(H.size, dtype=H.dense.dtype)), H.leaf_size)

    U1, V1, U2, V2 = H.u12, H.v12, H.u21, H.v21
    X11 = inverse(H.a11, policy)
    P = _dot(X11, U1)
    Q = _rdot(X11, V2)
    schur = add_lowrank(H.a22, -U2, V1 @ (U1.T @ Q), policy)
    Xs = inverse(schur, policy)
    W = _rdot(Xs, V1)

    top_left = add_lowrank(X11, P, Q @ (U2.T @ W), policy)
    u12, v12 = recompress(-P, W, policy)
    u21, v21 = recompress(-_dot(Xs, U2), Q, policy)
    return _node(H.size, H.leaf_size, top_left, Xs, u12, v12, u21, v21)


class HodlrLU:
    """Reusable recursive factorization for dense right-hand sides."""

    def __init__(self, H: HodlrMatrix, policy: TruncationPolicy):
        self.size = H.size
        if H.is_leaf:
            self.leaf = linalg_kernel.lu_factor(H.dense)
            return
        self.leaf = None
        self.split = H.split
        self.u2, self.v2, self.v1 = H.u21, H.v21, H.v12
        self.top = HodlrLU(H.a11, policy)
        # P = A11^{-1} U12
        self.p = self.top._solve(H.u12)
        schur = add_lowrank(H.a22, -H.u21, H.v12 @ (self.p.T @ H.v21), policy)
        self.bottom = HodlrLU(schur, policy)

    def solve(self, B) -> np.ndarray:
        B = np.asarray(B)
        vector = B.ndim == 1
        if vector:
            B = B[:, None]
        if B.shape[0] != self.size:
            raise ShapeMismatch(f"right-hand side has {B.shape[0]} rows, expected {self.size}")
        X = self._solve(B)
        return X[:, 0] if vector else X

    def _solve(self, B: np.ndarray) -> np.ndarray:
        if self.leaf is not None:
            return self.leaf.solve(B)
        h = self.split
        Y1 = self.top._solve(B[:h])
        X2 = self.bottom._solve(B[h:] - self.u2 @ (self.v2.T @ Y1))
        X1 = Y1 - self.p @ (self.v1.T @ X2)
        return np.vstack([X1, X2])


def factorize(H: HodlrMatrix, policy: TruncationPolicy) -> HodlrLU:
    return HodlrLU(H, policy)


def solve(H: HodlrMatrix, B: Union[HodlrMatrix, np.ndarray],
          policy: TruncationPolicy) -> Union[HodlrMatrix, np.ndarray]:
    """Solve H X = B; X has the same kind as B."""
    if isinstance(B, HodlrMatrix):
        _check_congruent(H, B)
        return matmul(inverse(H, policy), B, policy)
    return factorize(H, policy).solve(B)


def block_ranges(size: int, leaf_size: int, level: int, position: int) -> Tuple[slice, slice]:
    """
    Row and column ranges of an off-diagonal block. Nodes are numbered left
    to right within a level; position 2k is the upper-right block of node k
    and 2k + 1 its lower-left block.
    """
    if level < 0 or position < 0 or position >= 2 ** (level + 1):
        raise BadBlockIndex(f"no off-diagonal block at level {level}, position {position}")
    start, m = 0, size
    node = position // 2
    for depth in range(level, 0, -1):
        if _is_leaf_size(m, leaf_size):
            raise BadBlockIndex(f"level {level} is below the leaves of a size {size} partition")
        h = m // 2
        if (node >> (depth - 1)) & 1:
            start, m = start + h, m - h
        else:
            m = h
    if _is_leaf_size(m, leaf_size):
        raise BadBlockIndex(f"level {level} is below the leaves of a size {size} partition")
    h = m // 2
    top, bottom = slice(start, start + h), slice(start + h, start + m)
    return (top, bottom) if position % 2 == 0 else (bottom, top)


def _find_node(H: HodlrMatrix, level: int, node: int) -> HodlrMatrix:
    for depth in range(level, 0, -1):
        if H.is_leaf:
            raise BadBlockIndex(f"level {level} is below the leaves")
        H = H.a22 if (node >> (depth - 1)) & 1 else H.a11
    if H.is_leaf:
        raise BadBlockIndex(f"level {level} is below the leaves")
    return H


def offdiag_block(H: Union[HodlrMatrix, np.ndarray], level: int = 0, position: int = 0,
                  leaf_size: int = 32) -> np.ndarray:
    """Dense copy of one off-diagonal block of the partition."""
    if isinstance(H, HodlrMatrix):
        if level < 0 or position < 0 or position >= 2 ** (level + 1):
            raise BadBlockIndex(f"no off-diagonal block at level {level}, position {position}")
        node = _find_node(H, level, position // 2)
        if position % 2 == 0:
            return node.u12 @ node.v12.T
        return node.u21 @ node.v21.T
    A = np.asarray(H)
    rows, cols = block_ranges(A.shape[0], leaf_size, level, position)
    return A[rows, cols]


def offdiag_singular_values(H: Union[HodlrMatrix, np.ndarray], level: int = 0,
                            position: int = 0, leaf_size: int = 32) -> np.ndarray:
    """Full nonincreasing singular value list of an off-diagonal block (default the largest)."""
    return linalg_kernel.singular_values(offdiag_block(H, level, position, leaf_size))


def rank_profile(H: HodlrMatrix) -> List[Tuple[int, int, int]]:
    """(level, position, rank) for every off-diagonal block, level by level."""
    profile = []
    frontier = [H]
    level = 0
    while frontier:
        next_frontier = []
        for k, node in enumerate(frontier):
            if node is None or node.is_leaf:
                next_frontier += [None, None]
                continue
            profile.append((level, 2 * k, node.u12.shape[1]))
            profile.append((level, 2 * k + 1, node.u21.shape[1]))
            next_frontier += [node.a11, node.a22]
        if all(node is None for node in next_frontier):
            break
        frontier = next_frontier
        level += 1
    return profile


def rank_profile_text(H: HodlrMatrix) -> str:
    return "\n".join(f"{level} {position} {rank}" for level, position, rank in rank_profile(H))


def max_offdiag_rank(H: HodlrMatrix) -> int:
    return max((rank for _, _, rank in rank_profile(H)), default=0)


def norm2(H: HodlrMatrix) -> float:
    """Spectral norm; svds on a LinearOperator above DENSE_NORM_LIMIT."""
    if H.size <= DENSE_NORM_LIMIT:
        return linalg_kernel.norm2(to_dense(H))
    operator = LinearOperator(
        shape=H.shape, dtype=H.dtype,
        matvec=lambda x: dot(H, x), rmatvec=lambda x: rdot(H, x),
        matmat=lambda X: dot(H, X), rmatmat=lambda X: rdot(H, X),
    )
    s = svds(operator, k=1, v0=np.ones(H.size), return_singular_vectors=False)
    return float(s[0])
