import math

import numpy as np
import pytest
from conftest import random_spd
from hypothesis import given
from hypothesis import strategies as st

from sgdthermo import diffusion, models, stationary
from sgdthermo.errors import InvalidArgument, NoMinimum, NotAMinimum

# H = diag(1, 2), D = [[1, 1/2], [1/2, 1]], eta = 1, solved by hand
H2 = np.diag([1.0, 2.0])
D2 = np.array([[1.0, 0.5], [0.5, 1.0]])
SIGMA2 = np.array([[1.0, 1 / 3], [1 / 3, 0.5]])
C2 = np.array([[0.0, -1 / 6], [1 / 6, 0.0]])
RATE2 = 1 / 9
KL_DOUBLED_3D = 3 * (1 - math.log(2)) / (2 * math.log(2))

seeds = st.integers(0, 2**32 - 1)


def test_two_dimensional_hand_solution():
    S = stationary.solve_lyapunov(H2, D2, 1.0)
    assert np.allclose(S, SIGMA2, rtol=1e-14)
    C, rate, area = stationary.circulation_and_rates(H2, S, D2, 1.0)
    assert np.allclose(C, C2, atol=1e-15)
    assert rate == pytest.approx(RATE2, rel=1e-13)
    assert np.array_equal(area, C)


@given(seeds, st.integers(1, 12), st.floats(1e-8, 1.0))
def test_lyapunov_residual(seed, N, eta):
    rng = np.random.default_rng(seed)
    H = random_spd(rng, N, cond=1e3)
    A = rng.normal(size=(N, N))
    D = A @ A.T
    S = stationary.solve_lyapunov(H, D, eta)
    assert stationary.lyapunov_residual(H, S, D, eta) <= 1e-10
    assert np.array_equal(S, S.T)
    assert np.linalg.eigvalsh(S).min() > -1e-10 * np.abs(S).max()


@given(seeds, st.integers(2, 10))
def test_circulation_antisymmetric_and_rate_nonnegative(seed, N):
    rng = np.random.default_rng(seed)
    H = random_spd(rng, N)
    D = random_spd(rng, N)
    S = stationary.solve_lyapunov(H, D, 0.1)
    C, rate, _ = stationary.circulation_and_rates(H, S, D, 0.1)
    assert np.array_equal(C, -C.T)
    assert rate >= -1e-12
    # eta H S - D equals C when S solves the relation
    assert np.allclose(0.1 * H @ S - D, C, atol=1e-9 * np.abs(D).max())


def test_isotropic_diffusion_gives_equilibrium():
    rng = np.random.default_rng(5)
    H = random_spd(rng, 4)
    S = stationary.solve_lyapunov(H, 0.3 * H, 0.1)
    C, rate, _ = stationary.circulation_and_rates(H, S, 0.3 * H, 0.1)
    assert np.allclose(S, 3.0 * np.eye(4))
    assert np.max(np.abs(C)) < 1e-12 and abs(rate) < 1e-12


def test_indefinite_hessian_rejected():
    with pytest.raises(NotAMinimum):
        stationary.solve_lyapunov(np.diag([1.0, -1.0]), np.eye(2), 0.1)


def test_corrected_solver_reduces_to_plain_for_constant_diffusion():
    rng = np.random.default_rng(2)
    H = random_spd(rng, 3)
    D = random_spd(rng, 3)
    S = stationary.solve_lyapunov_corrected(H, lambda th: D, np.zeros(3), 0.01)
    assert np.allclose(S, stationary.solve_lyapunov(H, D, 0.01), rtol=1e-10)


def test_corrected_solver_quadratic_diffusion():
    # D(theta) = D0 + k theta theta^T, so HD S contracts to 2 k S
    rng = np.random.default_rng(3)
    H = random_spd(rng, 3)
    D0 = random_spd(rng, 3)
    k, eta = 0.05, 0.2
    sol = stationary.solve_lyapunov_corrected_parts(H, lambda th: D0 + k * np.outer(th, th), np.zeros(3), eta)
    S = sol.sigma
    lhs = H @ S + S @ H
    rhs = (2 * D0 + 2 * k * S) / eta
    # second differences with step 1e-4 carry ~1e-7 rounding noise
    assert np.allclose(lhs, rhs, rtol=1e-6)


def test_pseudo_inverse_drops_null_directions():
    D = np.diag([2.0, 1e-20, 0.0])
    inv, dropped = stationary.pseudo_inverse(D)
    assert dropped == 2
    assert np.allclose(inv, np.diag([0.5, 0.0, 0.0]))


def test_gaussian_kl_hand_value():
    ref = np.diag([1.0, 2.0, 0.5])
    assert stationary.gaussian_kl_bits(ref, sigma=2 * ref) == pytest.approx(KL_DOUBLED_3D, rel=1e-13)
    assert stationary.gaussian_kl_bits(ref, delta=ref) == pytest.approx(KL_DOUBLED_3D, rel=1e-13)
    assert stationary.gaussian_kl_bits(ref, sigma=ref) == 0.0


@given(seeds, st.floats(1e-12, 1e-5))
def test_kl_small_perturbation_is_quadratic(seed, size):
    rng = np.random.default_rng(seed)
    ref = random_spd(rng, 3)
    P = rng.normal(size=(3, 3))
    delta = size * (P + P.T) * np.abs(ref).max()
    kl = stationary.gaussian_kl_bits(ref, delta=delta)
    kl2 = stationary.gaussian_kl_bits(ref, delta=2 * delta)
    assert kl >= 0
    assert kl2 == pytest.approx(4 * kl, rel=0.05, abs=1e-300)


def test_kl_mean_term():
    ref = np.eye(2)
    kl = stationary.gaussian_kl_bits(ref, delta=np.zeros((2, 2)), mean_shift=np.array([1.0, 0.0]))
    assert kl == pytest.approx(1 / (2 * math.log(2)))


def test_kl_rejects_non_spd_candidate():
    with pytest.raises(InvalidArgument):
        stationary.gaussian_kl_bits(np.eye(2), sigma=-np.eye(2))


def test_exact_posterior_matches_linear_algebra():
    data = models.gen_regression_dataset(40, 0.1, 2)
    Psi = models.psi(data.inputs[:, 0]).T
    post, kl = stationary.exact_posterior_and_kl(Psi, data.outputs[:, 0], 0.1, 10.0, sigma_candidate=None,
                                                 delta=np.zeros((3, 3)))
    model = models.linearized_regression()
    H = models.second_order(model, data, post.theta0).H
    # loss = (1/M) sum s r^2 + lam |theta|^2 with s = M / (2 eps^2): Hessian is the posterior precision
    assert np.allclose(np.linalg.inv(H), post.sigma_po, rtol=1e-10)
    assert np.max(np.abs(models.gradient(model, data, post.theta0))) < 1e-8 * np.abs(H).max()
    assert kl == 0.0


def test_find_minimum(nonlinear, regression_data, theta0):
    g = models.gradient(nonlinear, regression_data, theta0)
    assert np.max(np.abs(g)) < 1e-8
    assert np.linalg.eigvalsh(models.second_order(nonlinear, regression_data, theta0).H).min() > 0


def test_find_minimum_reports_failure(small_data):
    with pytest.raises(NoMinimum):
        stationary.find_minimum(models.nonlinear_regression(), small_data, np.full(7, 5.0), max_iter=1)


def test_wor_centre_is_shifted(nonlinear, regression_data, theta0):
    th = stationary.theory_sgd_wor(nonlinear, regression_data, 1e-7, 10, theta0)
    _, g = stationary.landscape_value_and_grad(nonlinear, regression_data, th.theta0, "wor", 1e-7, 10)
    assert np.max(np.abs(g)) < 1e-6 * np.abs(th.H0).max()
    assert np.linalg.norm(th.theta0 - theta0) > 0


def test_wr_theory_bundle_round_trip(tmp_path, nonlinear, regression_data, theta0):
    th = stationary.theory_sgd_wr(nonlinear, regression_data, 1e-7, 10, theta0)
    assert th.entropy_rate > 0
    assert stationary.lyapunov_residual(th.H0, th.Sigma, th.D0, th.eta) < 1e-10
    th.to_json(tmp_path / "t.json")
    back = stationary.StationaryTheory.from_json(tmp_path / "t.json")
    assert np.array_equal(back.Sigma, th.Sigma) and np.array_equal(back.C, th.C)
    assert back.entropy_rate == th.entropy_rate and back.mode == "sgd-wr"


def test_earthquake_theory(nonlinear, regression_data, theta0):
    th = stationary.theory_earthquake(nonlinear, regression_data, 1e-7, 1e-4, theta0)
    assert np.allclose(th.Sigma, 0.5 * 1e-7 * 1e-8 * th.H0, rtol=1e-10)
    assert not np.any(th.C) and th.entropy_rate == 0.0
    assert th.extra["beta"] == pytest.approx(2 / (1e-7 * 1e-8))


def test_scaling_doubling_eta_and_m(nonlinear, regression_data, theta0):
    a = stationary.theory_sgd_wr(nonlinear, regression_data, 1e-7, 10, theta0)
    b = stationary.theory_sgd_wr(nonlinear, regression_data, 2e-7, 20, theta0)
    # exact D shifts Sigma by (n-1) factors: 19 -> 9 batches per epoch, (9/19)*2 = 18/19
    assert np.allclose(b.Sigma, a.Sigma * 18 / 19, rtol=1e-10)
    a = stationary.theory_sgd_wr(nonlinear, regression_data, 1e-7, 10, theta0, "approx")
    b = stationary.theory_sgd_wr(nonlinear, regression_data, 2e-7, 20, theta0, "approx")
    assert np.allclose(a.Sigma, b.Sigma, rtol=1e-12)


def test_posterior_kl_small_eta_regime():
    data = models.gen_regression_dataset(200, 0.1, 1)
    model = models.linearized_regression()
    sgld = [stationary.posterior_kl(model, data, e, 10, "sgld")["kl"] for e in (1e-7, 1e-6)]
    assert sgld[1] / sgld[0] == pytest.approx(100, rel=0.3)
    with pytest.raises(InvalidArgument):
        stationary.posterior_kl(models.nonlinear_regression(), data, 1e-7, 10)
