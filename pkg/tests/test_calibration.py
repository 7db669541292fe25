import math
import warnings

import numpy as np
import pytest

from calitr.calibration import (
    CalibrationConfig,
    CalibrationWeighter,
    calibrate,
    check_feasibility,
    compute_weights,
    default_stabilization,
    rho,
    rho_prime,
    solve_lambda,
    stabilize_weights,
    weight_gradient,
)
from calitr.core import ConstraintSpec
from calitr.exceptions import DomainViolation, Infeasible, NonPositiveWeight, NotConverged

THREE_POINT = np.array([[-1.5], [0.5], [0.5]])


def bisect(f, lo, hi, tol=1e-14):
    flo = f(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def primal_oracle(G, gamma, iters=100000):
    """Projected gradient on the primal divergence over the calibration set."""
    n = G.shape[0]
    C = np.column_stack([G, np.ones(n)])
    b = np.concatenate([np.zeros(G.shape[1]), [1.0]])
    proj = np.eye(n) - C @ np.linalg.solve(C.T @ C, C.T)
    w = np.full(n, 1.0 / n)
    w = w - C @ np.linalg.solve(C.T @ C, C.T @ w - b)
    assert w.min() > 0

    def grad(w):
        return n * (np.log(n * w) + 1) if gamma == 0 else -1.0 / w

    for _ in range(iters):
        d = -proj @ grad(w)
        if np.abs(d).max() < 1e-11:
            break
        curv = n / w.min() if gamma == 0 else 1.0 / w.min() ** 2
        step = min(1.0 / curv, 0.5 * w.min() / np.abs(d).max())
        w = w + step * d
    return w


# ---------------------------------------------------------------- rho


@pytest.mark.parametrize("gamma", [-1, -0.5, 0, 0.5, 1])
def test_rho_is_one_at_zero(gamma):
    assert rho(0.0, gamma) == 1.0


def test_rho_closed_forms():
    x = np.array([-0.7, 0.0, 0.4])
    np.testing.assert_allclose(rho(x, -1), 1 / (1 - x), rtol=1e-15)
    np.testing.assert_allclose(rho(x, 0), np.exp(x), rtol=1e-15)
    np.testing.assert_allclose(rho(x, 0.5), (1 + 0.5 * x) ** 2, rtol=1e-15)


def test_rho_prime_at_point():
    h = 1e-6
    fd = (rho(0.3 + h, 0.5) - rho(0.3 - h, 0.5)) / (2 * h)
    assert abs(rho_prime(0.3, 0.5) - fd) <= 1e-7


@pytest.mark.parametrize("gamma", [-1, -0.5, 0, 0.5, 1])
def test_rho_prime_matches_finite_differences(gamma):
    rng = np.random.default_rng(11)
    if gamma < 0:
        x = rng.uniform(-3, 0.8 / abs(gamma) if gamma != -1 else 0.8, 20)
    elif gamma > 0:
        x = rng.uniform(-0.8 / gamma, 3, 20)
    else:
        x = rng.uniform(-3, 3, 20)
    h = 1e-6
    fd = (rho(x + h, gamma) - rho(x - h, gamma)) / (2 * h)
    np.testing.assert_allclose(rho_prime(x, gamma), fd, rtol=1e-6)


@pytest.mark.parametrize("x, gamma", [(1.0, -1), (1.5, -1), (-2.5, 0.5), (2.1, -0.5)])
def test_rho_domain_violation(x, gamma):
    with pytest.raises(DomainViolation):
        rho(x, gamma)


# --------------------------------------------------------- feasibility


def test_centroid_is_feasible():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 2))
    rep = check_feasibility(X - X.mean(axis=0))
    assert rep.feasible and rep.margin > 0


def test_one_sided_data_infeasible_with_direction():
    rep = check_feasibility(np.array([[1.0], [2.0], [3.0]]))
    assert not rep.feasible
    assert rep.direction[0] == pytest.approx(-1.0)
    assert rep.separation < 0


def test_target_at_maximum_is_boundary():
    # target equals max of g = (1, 2, 3): best calibrating weights put all mass on one point
    rep = check_feasibility(np.array([[1.0], [2.0], [3.0]]) - 3.0)
    assert not rep.feasible
    assert rep.margin == 0.0
    assert rep.separation == pytest.approx(0.0, abs=1e-12)


def test_rank_deficient_constraints_infeasible():
    rng = np.random.default_rng(1)
    x = rng.normal(size=30)
    G = np.column_stack([x - x.mean(), 2 * (x - x.mean())])
    assert not check_feasibility(G).feasible


# ------------------------------------------------------------- solver


def test_zero_column_means_give_zero_lambda():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(30, 2))
    lam = solve_lambda(X - X.mean(axis=0), CalibrationConfig(gamma=0))
    np.testing.assert_allclose(lam, 0.0, atol=1e-14)


def test_entropy_balancing_analytic_lambda():
    lam = solve_lambda(THREE_POINT, CalibrationConfig(gamma=0))
    oracle = bisect(lambda t: -1.5 * math.exp(-1.5 * t) + math.exp(0.5 * t), -5, 5)
    assert abs(lam[0] - math.log(1.5) / 2) <= 1e-8
    assert abs(oracle - math.log(1.5) / 2) <= 1e-12


def test_empirical_likelihood_analytic_lambda():
    lam = solve_lambda(THREE_POINT, CalibrationConfig(gamma=-1))
    oracle = bisect(lambda t: -1.5 / (1 + 1.5 * t) + 1 / (1 - 0.5 * t), -0.6, 1.9)
    assert abs(lam[0] - 2 / 9) <= 1e-8
    assert abs(oracle - 2 / 9) <= 1e-12


def test_three_point_weights():
    sol = calibrate(THREE_POINT, CalibrationConfig(gamma=0))
    r = rho(THREE_POINT[:, 0] * sol.lambda_hat[0], 0)
    np.testing.assert_allclose(r, [1.5 ** -0.75, 1.5 ** 0.25, 1.5 ** 0.25], rtol=1e-12)
    np.testing.assert_allclose(r, [0.73783, 1.10668, 1.10668], atol=5e-5)
    np.testing.assert_allclose(sol.weights, [0.25, 0.375, 0.375], atol=1e-12)
    assert abs(sol.weights @ THREE_POINT[:, 0]) <= 1e-12


def test_lambda_zero_gives_uniform_weights():
    sol = compute_weights(np.arange(8.0)[:, None], np.zeros(1), CalibrationConfig(gamma=0))
    np.testing.assert_allclose(sol.weights, 1 / 8, rtol=0, atol=1e-15)


def test_least_squares_matches_qp_and_goes_negative():
    g = np.array([0.0, 1.0, 10.0])
    G = (g - 9.5)[:, None]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sol = calibrate(G, CalibrationConfig(gamma=1))
    # equality-constrained QP min sum (w - 1/n)^2 via its KKT system
    n = 3
    C = np.column_stack([G, np.ones(n)])
    K = np.block([[2 * np.eye(n), C], [C.T, np.zeros((2, 2))]])
    rhs = np.concatenate([2 * np.full(n, 1 / n), [0.0, 1.0]])
    w_qp = np.linalg.solve(K, rhs)[:n]
    np.testing.assert_allclose(sol.weights, w_qp, atol=1e-12)
    assert sol.has_negative and w_qp.min() < 0


@pytest.mark.parametrize("gamma", [0, -1])
def test_random_fixtures_match_primal_oracle(gamma):
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        X = rng.normal(size=(50, 3))
        G = X - rng.uniform(-0.3, 0.3, 3)
        sol = calibrate(G, CalibrationConfig(gamma=gamma))
        w = primal_oracle(G, gamma)
        assert np.max(np.abs(sol.weights - w)) <= 1e-6


def test_entropy_balancing_log_linear_form():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 3))
    G = X - np.array([0.2, -0.1, 0.1])
    sol = calibrate(G, CalibrationConfig(gamma=0))
    c = np.log(sol.weights) - X @ sol.lambda_hat
    assert np.ptp(c) <= 1e-8


def test_infeasible_targets_raise_for_nonpositive_gamma():
    G = np.array([[1.0], [2.0], [3.0]])
    for gamma in (0, -1):
        with pytest.raises(Infeasible) as info:
            calibrate(G, CalibrationConfig(gamma=gamma))
        assert info.value.report.direction is not None
        assert info.value.code == "calibration.infeasible"


def test_least_squares_boundary_only_warns():
    G = np.array([[1.0], [2.0], [3.0]]) - 3.0
    with pytest.warns(UserWarning):
        sol = calibrate(G, CalibrationConfig(gamma=1))
    assert abs(sol.weights @ G[:, 0]) <= 1e-10


def test_not_converged_with_tiny_budget():
    rng = np.random.default_rng(6)
    G = rng.normal(size=(100, 2)) + 0.8
    with pytest.raises(NotConverged):
        solve_lambda(G, CalibrationConfig(gamma=0, max_iter=1))


# ------------------------------------------------------- stabilization


def test_stabilization_no_op_when_below_cap():
    w = np.array([0.2, 0.3, 0.5])
    out, capped = stabilize_weights(w, 1.5)
    np.testing.assert_array_equal(out, w)
    assert capped == 0


def test_stabilization_formula():
    w = np.array([0.5, 0.25, 0.25])
    out, capped = stabilize_weights(w, 4.0)
    # 1/w = 2 + 4 -> 1/6 for the first entry, others unchanged (0.25 <= 1/4)
    raw = np.array([1 / 6, 0.25, 0.25])
    np.testing.assert_allclose(out, raw / raw.sum(), rtol=1e-15)
    assert capped == 1


def test_stabilization_requires_positive_weights():
    with pytest.raises(NonPositiveWeight):
        stabilize_weights(np.array([0.5, 0.6, -0.1]), 4.0)


def test_default_cap():
    assert default_stabilization(1000) == pytest.approx(82.89, abs=5e-3)


def test_auto_stabilization_flags_solution():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(200, 1))
    sol = calibrate(X - 0.9, CalibrationConfig(gamma=-1, stabilization="auto"))
    assert sol.stabilized
    assert sol.a_n == pytest.approx(12 * math.log(200))
    assert abs(sol.weights.sum() - 1) <= 1e-12


# ------------------------------------------------------ weight derivative


def test_weight_gradient_at_zero_is_centered_rows():
    rng = np.random.default_rng(8)
    G = rng.normal(size=(20, 3))
    dW = weight_gradient(G, np.zeros(3), 0)
    np.testing.assert_allclose(dW, G - G.mean(axis=0), atol=1e-13)


@pytest.mark.parametrize("gamma", [0, -1, 1])
def test_weight_gradient_matches_finite_differences(gamma):
    rng = np.random.default_rng(9)
    G = rng.normal(size=(20, 2)) * 0.3
    lam = np.array([0.2, -0.1])
    h = 1e-6

    def W(l):
        r = rho(G @ l, gamma)
        return len(r) * r / r.sum()

    fd = np.column_stack([(W(lam + h * e) - W(lam - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(weight_gradient(G, lam, gamma), fd, rtol=1e-6, atol=1e-9)


# -------------------------------------------------------------- estimator


def test_weighter_estimator():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(300, 2))
    spec = ConstraintSpec.means([0.1, -0.1])
    est = CalibrationWeighter(constraints=spec, gamma=0).fit(X)
    assert abs(est.weights_ @ X[:, 0] - 0.1) <= 1e-8
    np.testing.assert_allclose(est.density_ratio(X), 300 * est.weights_, rtol=1e-10)
    assert est.get_params()["gamma"] == 0
