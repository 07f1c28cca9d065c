import numpy as np
import pytest
from pydantic import ValidationError

import hodlr
import linalg_kernel
from errors import BadBlockIndex, ShapeMismatch
from hodlr import TruncationPolicy


def relative_error(A, B):
    return np.linalg.norm(A - B, 2) / np.linalg.norm(B, 2)


def all_nodes(H):
    if H.is_leaf:
        return []
    return [H] + all_nodes(H.a11) + all_nodes(H.a22)


def test_policy_needs_a_criterion():
    with pytest.raises(ValidationError):
        TruncationPolicy(rel_tol=0.0, abs_tol=0.0, max_rank=None)


def test_policy_keep_respects_cap():
    policy = TruncationPolicy(rel_tol=1e-3, max_rank=2)
    assert policy.keep(np.array([1.0, 0.5, 0.1, 1e-6]), 1.0) == 2


@pytest.mark.parametrize("dtype", [float, complex])
def test_recompress_keeps_the_product(rng, policy, dtype):
    U = rng.standard_normal((20, 6)).astype(dtype)
    V = rng.standard_normal((15, 6)).astype(dtype)
    if dtype is complex:
        U += 1j * rng.standard_normal((20, 6))
        V += 1j * rng.standard_normal((15, 6))
    U = np.hstack([U, U[:, :2]])
    V = np.hstack([V, V[:, :2]])
    U2, V2 = hodlr.recompress(U, V, policy)
    assert U2.shape[1] == 6
    assert linalg_kernel.orthonormality_defect(U2) < 1e-12
    assert relative_error(U2 @ V2.T, U @ V.T) < 1e-12


def test_from_dense_round_trip(rng, policy):
    A = rng.standard_normal((50, 50))
    H = hodlr.from_dense(A, policy)
    assert relative_error(hodlr.to_dense(H), A) < 1e-10


def test_partition_splits_floor_ceil(policy):
    H = hodlr.from_dense(np.eye(21), policy)
    assert H.a11.size == 10 and H.a22.size == 11


def test_normal_form_orthonormal_u(tridiagonal_100, policy):
    H = hodlr.from_dense(np.linalg.inv(tridiagonal_100), policy)
    for node in all_nodes(H):
        assert linalg_kernel.orthonormality_defect(node.u12) < 1e-12
        assert linalg_kernel.orthonormality_defect(node.u21) < 1e-12


def test_inverse_of_tridiagonal_has_rank_one_blocks(tridiagonal_100, policy):
    H = hodlr.from_dense(np.linalg.inv(tridiagonal_100), policy)
    assert hodlr.max_offdiag_rank(H) == 1
    lines = hodlr.rank_profile_text(H).splitlines()
    assert lines[0] == "0 0 1"
    assert all(len(line.split()) == 3 for line in lines)


def test_identity_and_zeros():
    assert np.array_equal(hodlr.to_dense(hodlr.identity(37, 8)), np.eye(37))
    assert np.array_equal(hodlr.to_dense(hodlr.zeros(37, 8)), np.zeros((37, 37)))


def test_scale_and_negation(rng, policy):
    A = rng.standard_normal((40, 40))
    H = hodlr.from_dense(A, policy)
    assert np.allclose(hodlr.to_dense(-H), -A)
    assert np.allclose(hodlr.to_dense(2.5 * H), 2.5 * A)


def test_add_matches_dense(rng, policy):
    A = rng.standard_normal((40, 40))
    B = rng.standard_normal((40, 40))
    total = hodlr.add(hodlr.from_dense(A, policy), hodlr.from_dense(B, policy), policy)
    assert relative_error(hodlr.to_dense(total), A + B) < 1e-10


def test_cancellation_truncates_to_zero(rng, policy):
    H = hodlr.from_dense(rng.standard_normal((40, 40)), policy)
    difference = hodlr.subtract(H, H, policy)
    assert hodlr.max_offdiag_rank(difference) == 0
    assert np.allclose(hodlr.to_dense(difference), 0.0)


def test_add_requires_congruent_trees(policy):
    with pytest.raises(ShapeMismatch):
        hodlr.add(hodlr.identity(16, 8), hodlr.identity(17, 8), policy)


def test_add_lowrank(rng, tridiagonal_100, policy):
    U = rng.standard_normal((100, 2))
    V = rng.standard_normal((100, 2))
    H = hodlr.add_lowrank(hodlr.from_dense(tridiagonal_100, policy), U, V, policy)
    assert relative_error(hodlr.to_dense(H), tridiagonal_100 + U @ V.T) < 1e-10
    assert hodlr.max_offdiag_rank(H) <= 3


def test_dot_and_rdot(rng, policy):
    A = rng.standard_normal((45, 45))
    H = hodlr.from_dense(A, policy)
    X = rng.standard_normal((45, 3))
    assert np.allclose(hodlr.dot(H, X), A @ X)
    assert np.allclose(hodlr.rdot(H, X), A.T @ X)
    assert np.allclose(H @ X[:, 0], A @ X[:, 0])


def test_matmul_of_quasiseparable_matrices(tridiagonal_100, policy):
    T_inv = np.linalg.inv(tridiagonal_100)
    H = hodlr.from_dense(T_inv, policy)
    product = hodlr.matmul(H, H, policy)
    assert relative_error(hodlr.to_dense(product), T_inv @ T_inv) < 1e-10
    assert hodlr.max_offdiag_rank(product) <= 2


def test_inverse_matches_dense(tridiagonal_100, policy):
    H = hodlr.from_dense(tridiagonal_100, policy)
    inverse = hodlr.inverse(H, policy)
    assert relative_error(hodlr.to_dense(inverse), np.linalg.inv(tridiagonal_100)) < 1e-10


def test_factorize_solves_many_right_hand_sides(rng, tridiagonal_100, policy):
    H = hodlr.from_dense(tridiagonal_100 + 0.1 * rng.standard_normal((100, 100)) / 10, policy)
    A = hodlr.to_dense(H)
    B = rng.standard_normal((100, 5))
    lu = hodlr.factorize(H, policy)
    assert np.allclose(lu.solve(B), np.linalg.solve(A, B), rtol=1e-9, atol=1e-11)
    assert np.allclose(lu.solve(B[:, 0]), np.linalg.solve(A, B[:, 0]), rtol=1e-9, atol=1e-11)


def test_solve_with_hodlr_right_hand_side(tridiagonal_100, policy):
    H = hodlr.from_dense(tridiagonal_100, policy)
    X = hodlr.solve(H, hodlr.identity(100, 8), policy)
    assert relative_error(hodlr.to_dense(X), np.linalg.inv(tridiagonal_100)) < 1e-10


def test_block_ranges_numbering():
    rows, cols = hodlr.block_ranges(8, 1, 0, 0)
    assert (rows, cols) == (slice(0, 4), slice(4, 8))
    rows, cols = hodlr.block_ranges(8, 1, 0, 1)
    assert (rows, cols) == (slice(4, 8), slice(0, 4))
    rows, cols = hodlr.block_ranges(8, 1, 1, 2)
    assert (rows, cols) == (slice(4, 6), slice(6, 8))


@pytest.mark.parametrize("level,position", [(1, 4), (-1, 0), (0, 2), (1, 0)])
def test_bad_block_index(level, position):
    with pytest.raises(BadBlockIndex):
        hodlr.block_ranges(8, 4, level, position)


def test_offdiag_block_same_for_tree_and_dense(tridiagonal_100, policy):
    T_inv = np.linalg.inv(tridiagonal_100)
    H = hodlr.from_dense(T_inv, policy)
    for level, position in [(0, 0), (0, 1), (1, 3), (2, 5)]:
        tree_block = hodlr.offdiag_block(H, level, position)
        dense_block = hodlr.offdiag_block(T_inv, level, position, leaf_size=8)
        assert np.allclose(tree_block, dense_block, atol=1e-12)


def test_offdiag_singular_values_nonincreasing(rng):
    sigmas = hodlr.offdiag_singular_values(rng.standard_normal((20, 20)), leaf_size=1)
    assert sigmas.size == 10
    assert np.all(np.diff(sigmas) <= 0)


def test_truncate_keeps_structure_when_loose(tridiagonal_100, policy):
    H = hodlr.from_dense(np.linalg.inv(tridiagonal_100), policy)
    same = hodlr.truncate(H, TruncationPolicy(rel_tol=1e-15))
    assert same.u12 is H.u12 and same.v21 is H.v21


@pytest.mark.parametrize("seed", range(50))
def test_truncation_error_bounded_by_levels(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    m = int(rng.integers(16, 257))
    leaf = 8
    l = int(rng.integers(1, 6))
    # planted geometric decay in every off-diagonal block
    Q1 = linalg_kernel.random_orthogonal(m, rng)
    Q2 = linalg_kernel.random_orthogonal(m, rng)
    A = Q1 @ np.diag(0.5 ** np.arange(m)) @ Q2 + np.eye(m)
    H = hodlr.from_dense(A, TruncationPolicy(rel_tol=1e-15, leaf_size=leaf))
    truncated = hodlr.truncate(H, TruncationPolicy(rel_tol=0.0, max_rank=l, leaf_size=leaf))

    worst = 0.0
    for level, position, _ in hodlr.rank_profile(H):
        sigmas = hodlr.offdiag_singular_values(A, level, position, leaf_size=leaf)
        if sigmas.size > l:
            worst = max(worst, sigmas[l])
    levels = 1 + max(level for level, _, _ in hodlr.rank_profile(H))
    error = np.linalg.norm(A - hodlr.to_dense(truncated), 2)
    assert error <= worst * levels + 1e-12 * np.linalg.norm(A, 2)


def test_norm2_large_uses_iterative_path():
    m = hodlr.DENSE_NORM_LIMIT + 44
    T = np.diag(np.linspace(1.0, 5.0, m)) + np.diag(-np.ones(m - 1), 1) * 0.1
    H = hodlr.from_dense(T, TruncationPolicy(leaf_size=32))
    assert hodlr.norm2(H) == pytest.approx(np.linalg.norm(T, 2), rel=1e-8)
