import itertools

import numpy as np
import pytest

import hodlr
import problems
import qcr_solver
from errors import Breakdown, FallbackWarning, ResidualTooLarge, ShapeMismatch, UnsupportedSize
from hodlr import TruncationPolicy
from qcr_solver import BlockTridToeplitzSystem


def dominant_system(rng, n, m):
    B = rng.standard_normal((m, m))
    C = rng.standard_normal((m, m))
    A = rng.standard_normal((m, m)) + 4 * m * np.eye(m)
    return BlockTridToeplitzSystem(B, A, C, rng.standard_normal((n, m)))


def dense_oracle(system):
    return np.linalg.solve(qcr_solver.to_dense(system), system.rhs.ravel()).reshape(system.n, system.m)


@pytest.mark.parametrize("n", [1, 3, 7, 15, 1023])
def test_fast_sizes(n):
    assert qcr_solver.is_fast_size(n)


@pytest.mark.parametrize("n", [2, 4, 10, 1000])
def test_other_sizes(n):
    assert not qcr_solver.is_fast_size(n)


def test_oracle_equivalence(rng):
    cases = list(itertools.product([7, 15, 31], [4, 8, 20]))
    cases = (cases * 3)[:20]
    for n, m in cases:
        system = dominant_system(rng, n, m)
        solution = qcr_solver.solve(system)
        expected = dense_oracle(system)
        assert np.linalg.norm(solution.x - expected) <= 1e-8 * np.linalg.norm(expected)
        assert not solution.fallback
        assert solution.levels == int(np.log2(n + 1)) - 1


def test_hodlr_backend_oracle(rng, policy):
    system = dominant_system(rng, 15, 20)
    solution = qcr_solver.solve(system, policy, backend="hodlr")
    expected = dense_oracle(system)
    assert np.linalg.norm(solution.x - expected) <= 1e-8 * np.linalg.norm(expected)
    assert solution.max_offdiag_rank is not None


def test_hodlr_blocks_accepted(rng, policy):
    dense = dominant_system(rng, 7, 20)
    system = BlockTridToeplitzSystem(hodlr.from_dense(dense.B, policy), hodlr.from_dense(dense.A, policy),
                                     hodlr.from_dense(dense.C, policy), dense.rhs)
    x = qcr_solver.solve(system, policy, backend="dense").x
    assert np.linalg.norm(x - dense_oracle(dense)) <= 1e-8 * np.linalg.norm(dense_oracle(dense))


@pytest.mark.parametrize("backend", ["dense", "hodlr"])
def test_poisson_127(backend):
    system = problems.poisson_system(127, 127)
    solution = qcr_solver.solve(system, TruncationPolicy(rel_tol=1e-12, leaf_size=32), backend=backend)
    assert solution.relative_residual <= 1e-9
    assert solution.levels == 6


def test_block_matvec_matches_dense(rng):
    system = dominant_system(rng, 5, 3)
    x = rng.standard_normal((5, 3))
    expected = (qcr_solver.to_dense(system) @ x.ravel()).reshape(5, 3)
    assert np.allclose(qcr_solver.block_matvec(system, x), expected)


def test_residual_of_exact_solution(rng):
    system = dominant_system(rng, 7, 4)
    assert qcr_solver.residual(system, dense_oracle(system)) < 1e-14


def test_reduce_step_halves_system(rng):
    system = dominant_system(rng, 7, 4)
    inner, back = qcr_solver.reduce_step(system)
    assert inner.n == 3
    x = dense_oracle(system)
    # the reduced system is solved by the even unknowns of the full one
    assert np.allclose(dense_oracle(inner), x[1::2])
    assert np.allclose(qcr_solver.back_substitute(back, x[1::2]), x[0::2])


def test_reduce_step_needs_odd_count(rng):
    with pytest.raises(UnsupportedSize):
        qcr_solver.reduce_step(dominant_system(rng, 4, 3))


def test_fallback_for_other_sizes(rng):
    system = dominant_system(rng, 10, 5)
    with pytest.warns(FallbackWarning):
        solution = qcr_solver.solve(system)
    assert solution.fallback
    assert np.allclose(solution.x, dense_oracle(system))


def test_fallback_can_be_refused(rng):
    with pytest.raises(UnsupportedSize):
        qcr_solver.solve(dominant_system(rng, 10, 5), allow_fallback=False)


def test_singular_diagonal_block_breaks_down():
    m = 3
    system = BlockTridToeplitzSystem(np.eye(m), np.zeros((m, m)), np.eye(m), np.ones((3, m)))
    with pytest.raises(Breakdown):
        qcr_solver.solve(system)


def test_block_shape_checked():
    with pytest.raises(ShapeMismatch):
        BlockTridToeplitzSystem(np.eye(3), np.eye(4), np.eye(3), np.ones((3, 3)))


def test_residual_tolerance_enforced(rng):
    with pytest.raises(ResidualTooLarge):
        qcr_solver.solve(dominant_system(rng, 7, 4), tol_res=1e-30)


@pytest.mark.slow
def test_poisson_255_ranks_stay_bounded():
    system = problems.poisson_system(255, 255)
    solution = qcr_solver.solve(system, TruncationPolicy(rel_tol=1e-12, leaf_size=32), backend="hodlr")
    assert solution.relative_residual <= 1e-9
    assert solution.max_offdiag_rank is not None
    assert solution.max_offdiag_rank <= 30
