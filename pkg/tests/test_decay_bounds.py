import math
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.integrate

import decay_bounds as db
import hodlr
import problems
from cyclic_reduction import LaurentTriple, solve_quadratic_equations
from errors import DomainError, NoSplitting, NotDiagonalizable


def poisson_t(m):
    lam = 4 - 2 * math.cos(math.pi / (m + 1))
    return (lam - math.sqrt(lam ** 2 - 4)) / 2


def poisson_decay(m, max_l=25):
    phi = problems.poisson(m)
    split = db.spectral_split(phi)
    solutions = solve_quadratic_equations(phi, check_coupling=False)
    sigmas = hodlr.offdiag_singular_values(solutions.H0, 0, 0, leaf_size=1)
    E, F = db.point_sets(phi, 0, 0, leaf_size=1)
    estimates = db.greedy_rational_curve(E, F, db.seed_point(split), max_l)
    C_ref = hodlr.offdiag_block(solutions.H0, 0, 0, leaf_size=1)
    bound = db.bound_curve(split, C_ref, "symmetric-palindromic", estimates)
    return sigmas, bound, split


@pytest.mark.parametrize("m", [5, 20, 50])
def test_poisson_split(m):
    split = db.spectral_split(problems.poisson(m))
    assert split.balanced and split.valid
    assert split.infinite_count == 0
    assert split.t == pytest.approx(poisson_t(m), rel=1e-10)


def test_poisson_t_approaches_one():
    assert 1 - poisson_t(200) == pytest.approx(math.pi / 201, rel=0.2)


def test_no_splitting_on_unit_circle():
    with pytest.raises(NoSplitting):
        db.spectral_split(LaurentTriple.from_scalars(-1.0, 2.0, -1.0))


def test_infinite_eigenvalues_count_as_outside():
    phi = LaurentTriple(np.diag([0.1, 0.1]), np.diag([-1.0, -1.0]), np.diag([0.1, 0.0]))
    split = db.spectral_split(phi)
    assert split.infinite_count == 1
    assert split.balanced
    assert np.sum(np.isinf(split.outside)) == 1


def test_point_sets_closed_under_reciprocal(qbd_small):
    E, F = db.point_sets(qbd_small, 0, 0, leaf_size=1)
    assert np.all(np.abs(E) < 1)
    assert np.all(np.abs(F) > 1)
    nonzero = E[E != 0]
    for z in 1 / nonzero:
        assert np.min(np.abs(F - z)) <= 1e-9 * abs(z)


def test_sub_block_uses_block_rows():
    phi = problems.poisson(8)
    top = db.sub_block(phi, 0, 0, leaf_size=1)
    bottom = db.sub_block(phi, 0, 1, leaf_size=1)
    assert top.m == 4 and bottom.m == 4
    assert np.array_equal(top.A_zero, phi.A_zero[:4, :4])
    assert np.array_equal(bottom.A_zero, phi.A_zero[4:, 4:])


def test_greedy_curve_properties():
    E = np.array([0.1, 0.3, 0.5])
    F = 1 / E
    curve = db.greedy_rational_curve(E, F, 0.5, 6)
    assert curve[0] == 1.0
    assert np.all(np.diff(curve) <= 0)
    # zeros on every point of E kill the estimate
    assert curve[3] == 0.0


@pytest.mark.parametrize("E,F", [
    (np.array([]), np.array([2.0])),
    (np.array([0.5]), np.array([])),
    (np.array([0.5, 2.0]), np.array([2.0])),
])
def test_greedy_domain_errors(E, F):
    with pytest.raises(DomainError):
        db.greedy_rational_estimate(E, F, 0.0, 2)


def test_markov_estimate_shapes():
    E = np.array([0.0, 0.2, 0.9])
    F = np.array([1.2, 5.0])
    curve = db.markov_rational_curve(E, F, 0.9, 1.2, 10)
    assert curve[0] == 1.0
    assert np.all(np.diff(curve) <= 0)
    assert curve[-1] < curve[1]


@pytest.mark.parametrize("x", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
def test_elliptic_k_matches_quadrature(x):
    expected, _ = scipy.integrate.quad(lambda t: 1 / math.sqrt(1 - (x * math.sin(t)) ** 2),
                                       0, math.pi / 2, epsabs=1e-14, epsrel=1e-14)
    assert db.elliptic_k(x) == pytest.approx(expected, abs=1e-10)


def test_elliptic_k_domain():
    with pytest.raises(DomainError):
        db.elliptic_k(1.0)


def test_rho_tilde_close_near_one():
    rho, rho_tilde = db.zolotarev_rho(0.99)
    assert math.log(rho_tilde) / math.log(rho) == pytest.approx(1.0, rel=0.05)


def test_zolotarev_closed_form_flags_vacuous():
    assert db.zolotarev_closed_form(0.99, 0).value == 1.0
    assert db.zolotarev_closed_form(0.999, 1).vacuous
    assert math.isinf(db.zolotarev_closed_form(0.999, 1).value)
    small = db.zolotarev_closed_form(0.2, 3)
    assert not small.vacuous and small.value < 1e-3


def test_zolotarev_curve_is_capped():
    curve = db.zolotarev_curve(0.9, 10)
    assert curve[0] == 1.0 and curve[1] == 1.0
    assert np.all(curve <= 1.0)
    assert np.all(np.diff(curve) <= 0)


def test_real_sets_delta():
    E = np.array([-0.5, 0.2])
    assert db.real_sets_delta(E, np.array([4.0, -3.0])) == pytest.approx(0.5)
    assert db.real_sets_delta(np.array([0.5j]), np.array([3.0])) is None


def test_finite_step_rate_decreases(poisson_small):
    E, _ = db.point_sets(poisson_small, 0, 0, leaf_size=1)
    rates = db.finite_step_rate(E, 6, count=128)
    assert rates[0] == 1.0
    assert rates[-1] < 1.0


def test_prior_line():
    line = db.prior_line(3, 0.5, gamma=8.0)
    assert np.allclose(line, [8.0, 4.0, 2.0])


def test_condition_factor_rejects_defective():
    jordan = np.array([[0.5, 1.0], [0.0, 0.5]])
    fake = SimpleNamespace(G=jordan, G_hat=np.eye(2) * 0.1, R=np.eye(2) * 0.1, R_hat=np.eye(2) * 0.1)
    with pytest.raises(NotDiagonalizable):
        db.condition_factor(fake)


def test_poisson_bound_dominates_small():
    sigmas, bound, _ = poisson_decay(40)
    assert bound.parity == 1
    assert bound.gamma == pytest.approx(2 * sigmas[0])
    floor = 100 * np.finfo(float).eps * sigmas[0]
    for index, sigma in enumerate(sigmas[:25], start=1):
        if sigma > floor:
            assert sigma <= bound.bound_for_sigma(index) * (1 + 1e-8)


def test_general_mode_on_random_qbd():
    phi = problems.random_qbd(24, seed=problems.DEFAULT_SEED)
    split = db.spectral_split(phi)
    solutions = solve_quadratic_equations(phi, check_coupling=False)
    sigmas = hodlr.offdiag_singular_values(solutions.H0, 0, 0, leaf_size=1)
    E, F = db.point_sets(phi, 0, 0, leaf_size=1)
    lambda1, lambda2 = split.closest_to_one()
    estimates = db.markov_rational_curve(E, F, lambda1, lambda2, 12)
    C_ref = hodlr.offdiag_block(solutions.H0, 0, 0, leaf_size=1)
    bound = db.bound_curve(split, C_ref, "general", estimates, solutions)
    assert bound.parity == 2
    assert bound.condition_factor >= 1.0
    floor = 100 * np.finfo(float).eps * sigmas[0]
    for index, sigma in enumerate(sigmas, start=1):
        if sigma > floor:
            assert sigma <= bound.bound_for_sigma(index) * (1 + 1e-8)
    assert db.measured_gamma(sigmas, estimates, 2, floor=floor) <= bound.gamma * (1 + 1e-8)


def test_general_mode_needs_solutions(poisson_small):
    split = db.spectral_split(poisson_small)
    with pytest.raises(ValueError):
        db.bound_curve(split, np.eye(2), "general", [1.0])


def test_decay_table_and_dat_file(tmp_path):
    sigmas, bound, split = poisson_decay(16, max_l=25)
    table = db.decay_table(sigmas, bound, None, db.prior_line(25, split.t), rows=25)
    assert list(table.columns) == ["l", "sigma_l", "bound_rational", "bound_zolotarev", "bound_prior"]
    assert len(table) == 25
    assert table["sigma_l"].iloc[-1] == 0.0
    path = tmp_path / "decay.dat"
    db.write_dat(table, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# l sigma_l bound_rational bound_zolotarev bound_prior"
    assert len(lines) == 26
    assert lines[1].split()[0] == "1"
    data = np.loadtxt(path)
    assert data.shape == (25, 5)
    assert np.all(np.isnan(data[:, 3]))


@pytest.mark.slow
def test_poisson_200_reproduction():
    sigmas, bound, _ = poisson_decay(200)
    assert sigmas[20] / sigmas[0] <= 1e-10
    floor = 100 * np.finfo(float).eps * sigmas[0]
    for index, sigma in enumerate(sigmas[:25], start=1):
        if sigma > floor:
            assert sigma <= bound.bound_for_sigma(index) * (1 + 1e-8)
    prior = db.prior_line(25, 0.995)
    for index in range(2, 26):
        assert prior[index - 1] >= bound.bound_for_sigma(index)


@pytest.mark.slow
def test_random_qbd_300_reproduction():
    sample = problems.random_qbd_sample(300, seed=problems.DEFAULT_SEED)
    phi = sample.triple
    solutions = solve_quadratic_equations(phi, check_coupling=False)
    sigmas = hodlr.offdiag_singular_values(solutions.H0, 0, 0, leaf_size=1)
    E, F = db.point_sets(phi, 0, 0, leaf_size=1)
    lambda1, lambda2 = sample.split.closest_to_one()
    estimates = db.markov_rational_curve(E, F, lambda1, lambda2, 25)
    C_ref = hodlr.offdiag_block(solutions.H0, 0, 0, leaf_size=1)
    bound = db.bound_curve(sample.split, C_ref, "general", estimates, solutions)
    assert sigmas[24] / sigmas[0] <= 1e-12
    floor = 100 * np.finfo(float).eps * sigmas[0]
    for index, sigma in enumerate(sigmas[:25], start=1):
        if sigma > floor:
            assert sigma <= bound.bound_for_sigma(index) * (1 + 1e-8)
