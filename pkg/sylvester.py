"""
Generalized Sylvester equations  sum_i A_i X B_i = C  with tridiagonal
Toeplitz right factors B_i.

Applying vec to both sides gives W vec(X) = vec(C) with
W = sum_i B_i^T kron A_i, a block tridiagonal block-Toeplitz matrix whose
blocks are combinations of the A_i; that system goes to the QCR solver.

A right factor is given by its scalar triple (sub, diagonal, super).
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse

import hodlr
import linalg_kernel
import qcr_solver
from errors import NotToeplitz, ResidualTooLarge, ShapeMismatch
from hodlr import TruncationPolicy
from qcr_solver import BlockTridToeplitzSystem

logger = logging.getLogger(__name__)

DEFAULT_SEED = 0xC0FFEE
DEFAULT_EPSILON = 0.0333

Triple = Tuple[float, float, float]


def vec(X) -> np.ndarray:
    """Stack the columns of X."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ShapeMismatch(f"vec needs a matrix, got shape {X.shape}")
    return X.reshape(-1, order="F")


def unvec(x, m: int, n: int) -> np.ndarray:
    x = np.asarray(x)
    if x.size != m * n:
        raise ShapeMismatch(f"cannot reshape {x.size} entries into {m}x{n}")
    return x.reshape(m, n, order="F")


def toeplitz_triple(B) -> Triple:
    """(sub, diagonal, super) of a tridiagonal Toeplitz matrix; NotToeplitz otherwise."""
    B = linalg_kernel.as_dense(B, "B")
    n = B.shape[0]
    if B.shape != (n, n) or n == 0:
        raise NotToeplitz(f"right factor must be square and nonempty, got {B.shape}")
    diag = B[0, 0]
    sub = B[1, 0] if n > 1 else 0.0
    sup = B[0, 1] if n > 1 else 0.0
    if not np.array_equal(B, tridiagonal(n, (sub, diag, sup)).toarray()):
        raise NotToeplitz("right factor is not tridiagonal Toeplitz")
    return (float(sub), float(diag), float(sup))


def tridiagonal(n: int, triple: Triple) -> scipy.sparse.csr_matrix:
    sub, diag, sup = triple
    return scipy.sparse.diags([sub, diag, sup], [-1, 0, 1], shape=(n, n), format="csr")


@dataclass(frozen=True)
class SylvesterTerm:
    A: np.ndarray
    triple: Triple

    def __post_init__(self):
        object.__setattr__(self, "A", linalg_kernel.as_dense(self.A, "A"))
        if len(self.triple) != 3:
            raise NotToeplitz(f"right factor triple needs 3 entries, got {len(self.triple)}")
        object.__setattr__(self, "triple", tuple(float(t) for t in self.triple))

    @classmethod
    def from_dense(cls, A, B) -> "SylvesterTerm":
        return cls(A, toeplitz_triple(B))


@dataclass(frozen=True)
class GeneralizedSylvesterProblem:
    terms: Tuple[SylvesterTerm, ...]
    C: np.ndarray

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ShapeMismatch("a Sylvester problem needs at least one term")
        C = linalg_kernel.as_dense(self.C, "C")
        m, n = C.shape
        for i, term in enumerate(terms):
            if term.A.shape != (m, m):
                raise ShapeMismatch(f"A_{i + 1} has shape {term.A.shape}, expected {(m, m)}")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "C", C)

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[1]

    @property
    def s(self) -> int:
        return len(self.terms)


def apply_operator(problem: GeneralizedSylvesterProblem, X) -> np.ndarray:
    """sum_i A_i X B_i."""
    X = np.asarray(X, dtype=float)
    if X.shape != (problem.m, problem.n):
        raise ShapeMismatch(f"X has shape {X.shape}, expected {(problem.m, problem.n)}")
    out = np.zeros_like(X)
    for term in problem.terms:
        B = tridiagonal(problem.n, term.triple)
        out += term.A @ (B.T @ X.T).T
    return out


def sylvester_residual(problem: GeneralizedSylvesterProblem, X) -> float:
    """||sum A_i X B_i - C||_F / ||C||_F."""
    gap = np.linalg.norm(apply_operator(problem, X) - problem.C)
    scale = np.linalg.norm(problem.C)
    return float(gap / scale) if scale > 0 else float(gap)


def _combine(blocks: Sequence, weights: Sequence[float], backend: str,
             policy: TruncationPolicy):
    if backend == "hodlr":
        total = hodlr.zeros(blocks[0].size, blocks[0].leaf_size)
        for block, w in zip(blocks, weights):
            if w != 0:
                total = hodlr.add(total, hodlr.scale(block, w), policy)
        return total
    return sum(w * block for block, w in zip(blocks, weights))


def assemble(problem: GeneralizedSylvesterProblem, backend: str = "dense",
             policy: Optional[TruncationPolicy] = None) -> BlockTridToeplitzSystem:
    """
    Block system of W = sum_i B_i^T kron A_i: sub-diagonal sum(super_i A_i),
    diagonal sum(diag_i A_i), super-diagonal sum(sub_i A_i), rhs = vec(C).
    """
    policy = policy or TruncationPolicy()
    if backend == "hodlr":
        blocks = [hodlr.from_dense(term.A, policy) for term in problem.terms]
    else:
        blocks = [term.A for term in problem.terms]

    subs = [term.triple[0] for term in problem.terms]
    diags = [term.triple[1] for term in problem.terms]
    sups = [term.triple[2] for term in problem.terms]
    return BlockTridToeplitzSystem(
        B=_combine(blocks, sups, backend, policy),
        A=_combine(blocks, diags, backend, policy),
        C=_combine(blocks, subs, backend, policy),
        rhs=problem.C.T,
    )


def kronecker_matrix(problem: GeneralizedSylvesterProblem) -> np.ndarray:
    """The dense mn x mn matrix W, for small oracle problems."""
    n = problem.n
    return sum(np.kron(tridiagonal(n, term.triple).toarray().T, term.A) for term in problem.terms)


def solve_sylvester(problem: GeneralizedSylvesterProblem,
                    policy: Optional[TruncationPolicy] = None, backend: str = "hodlr",
                    tol_res: float = 1e-8, qcr_tol: Optional[float] = None) -> np.ndarray:
    """Solve through the block tridiagonal reduction; checks the Frobenius residual."""
    started = time.perf_counter()
    system = assemble(problem, backend, policy)
    solution = qcr_solver.solve(system, policy, backend=backend, tol_res=qcr_tol)
    X = solution.x.T.copy()
    rel = sylvester_residual(problem, X)
    logger.info(f"Sylvester m={problem.m} n={problem.n} s={problem.s} backend={backend} "
                f"residual={rel:.3e} time={time.perf_counter() - started:.3f}s")
    if rel > tol_res:
        raise ResidualTooLarge(f"generalized Sylvester solve m={problem.m} n={problem.n}", rel)
    return X


def _scaled_identity(A: np.ndarray) -> Optional[float]:
    alpha = A[0, 0] if A.size else 0.0
    return float(alpha) if np.array_equal(A, alpha * np.eye(A.shape[0])) else None


def reference_solve(problem: GeneralizedSylvesterProblem) -> np.ndarray:
    """
    Baseline solver: scipy's Bartels-Stewart solve_sylvester when the problem
    reads A X + X B = C, dense LU of the Kronecker matrix otherwise.
    """
    if problem.s == 2:
        first, second = problem.terms
        for left, right in ((first, second), (second, first)):
            beta = left.triple[1]
            alpha = _scaled_identity(right.A)
            if left.triple[0] == left.triple[2] == 0 and beta != 0 and alpha:
                B = alpha * tridiagonal(problem.n, right.triple).toarray()
                return scipy.linalg.solve_sylvester(beta * left.A, B, problem.C)
    x = linalg_kernel.lu_solve(kronecker_matrix(problem), vec(problem.C))
    return unvec(x, problem.m, problem.n)


def convection_diffusion_setup(n: int, epsilon: float = DEFAULT_EPSILON,
                               w_coeffs: Union[Callable[[np.ndarray], np.ndarray], float, None] = None,
                               seed: int = DEFAULT_SEED) -> GeneralizedSylvesterProblem:
    """
    -eps Laplace(u) + w . grad(u) = f on the unit square, Dirichlet boundary,
    centered differences on n interior points per direction:

        (eps T + Phi B1) U + U (eps T) = F

    T the scaled second difference, B1 the centered first difference, Phi the
    diagonal sampling of the x-component of w (default 1 + (x + 1)^2 / 4).
    """
    if n < 3:
        raise ValueError(f"convection-diffusion grid needs n >= 3, got {n}")
    h = 1.0 / (n + 1)
    x = h * np.arange(1, n + 1)
    if w_coeffs is None:
        w = 1 + (x + 1) ** 2 / 4
    elif callable(w_coeffs):
        w = np.asarray(w_coeffs(x), dtype=float) * np.ones(n)
    else:
        w = float(w_coeffs) * np.ones(n)

    second = (-1 / h ** 2, 2 / h ** 2, -1 / h ** 2)
    T = tridiagonal(n, second).toarray()
    B1 = tridiagonal(n, (-1 / (2 * h), 0.0, 1 / (2 * h))).toarray()
    left = epsilon * T + w[:, None] * B1

    rng = np.random.Generator(np.random.PCG64(seed))
    F = rng.random((n, n))
    terms = (
        SylvesterTerm(left, (0.0, 1.0, 0.0)),
        SylvesterTerm(np.eye(n), tuple(epsilon * t for t in second)),
    )
    return GeneralizedSylvesterProblem(terms, F)


def save_problem(problem: GeneralizedSylvesterProblem, path: Union[str, Path]):
    """
    Text layout: header 'm n s', then per term a line
    'term beta_sub beta_diag beta_super nnz' followed by 1-based coordinate
    entries of A_i, then 'C' and the dense rows of C.
    """
    lines = ["# generalized sylvester problem", f"{problem.m} {problem.n} {problem.s}"]
    for term in problem.terms:
        coo = scipy.sparse.coo_matrix(term.A)
        sub, diag, sup = term.triple
        lines.append(f"term {float(sub)!r} {float(diag)!r} {float(sup)!r} {coo.nnz}")
        lines += [f"{i + 1} {j + 1} {float(v)!r}" for i, j, v in zip(coo.row, coo.col, coo.data)]
    lines.append("C")
    lines += [" ".join(repr(float(v)) for v in row) for row in problem.C]
    Path(path).write_text("\n".join(lines) + "\n")
    logger.info(f"Saved Sylvester problem m={problem.m} n={problem.n} s={problem.s} to {path}")


def load_problem(path: Union[str, Path]) -> GeneralizedSylvesterProblem:
    rows = [line.split() for line in Path(path).read_text().splitlines()
            if line.strip() and not line.startswith("#")]
    m, n, s = (int(v) for v in rows[0])
    cursor = 1
    terms: List[SylvesterTerm] = []
    for _ in range(s):
        tag, sub, diag, sup, nnz = rows[cursor]
        if tag != "term":
            raise ShapeMismatch(f"expected a term header, found {tag!r}")
        entries = np.array(rows[cursor + 1: cursor + 1 + int(nnz)], dtype=float).reshape(-1, 3)
        A = scipy.sparse.coo_matrix(
            (entries[:, 2], (entries[:, 0].astype(int) - 1, entries[:, 1].astype(int) - 1)),
            shape=(m, m),
        ).toarray()
        terms.append(SylvesterTerm(A, (float(sub), float(diag), float(sup))))
        cursor += 1 + int(nnz)
    if rows[cursor] != ["C"]:
        raise ShapeMismatch("missing right-hand side section")
    C = np.array(rows[cursor + 1: cursor + 1 + m], dtype=float).reshape(m, n)
    return GeneralizedSylvesterProblem(tuple(terms), C)
