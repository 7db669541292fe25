import numpy as np
import pytest

from calitr.calibration import CalibrationConfig, calibrate, compute_weights, rho, weight_gradient
from calitr.core import LinearRule, SourceSample, TargetSample, build_constraint_matrix
from calitr.exceptions import LengthMismatch, SingularG
from calitr.nuisance import (
    CallableOutcome,
    CallablePropensity,
    ConstantPropensity,
    NuisanceFit,
    fit_forest_outcome,
    fit_linear_outcome,
    fit_nuisance,
)
from calitr.simulate import (
    TARGET_MEANS,
    gen_source,
    propensity,
    target_covariates,
    true_value_mc,
)
from calitr.value import (
    PseudoOutcomes,
    _solve,
    aipw_value,
    eta_matrices,
    evaluate_on_target,
    lambda_matrices,
    psi,
    theta_matrices,
    variance_nonparametric,
    variance_parametric,
)

RULE = LinearRule([0.3, 0.2, -0.6, 0.7])


def test_psi_hand_values():
    assert psi(2.0, 1, 1, 0.5, 0.0, 1.0) == pytest.approx(3.0)
    assert psi(5.0, 0, 1, 0.3, 0.7, 1.4) == pytest.approx(1.4)
    y = np.array([1.0, 2.0, 3.0])
    out = psi(y, [1, 1, 0], [1, 1, 0], [0.2, 0.7, 0.4], y, y)
    np.testing.assert_array_equal(out, y)


# five observations, p = 1, fixed nuisances
X5 = np.array([[-1.0], [0.5], [2.0], [0.0], [1.5]])
A5 = np.array([1, 0, 1, 1, 0])
Y5 = np.array([2.0, 1.0, 4.0, -1.0, 3.0])
PI5 = [0.4, 0.6, 0.8, 0.5, 0.3]
MU0 = [1.0, 0.5, 2.0, 0.0, 1.0]
MU1 = [1.5, 1.0, 3.0, 0.5, 2.5]
RULE5 = LinearRule([-0.5, 1.0])


def _table_lookup(values):
    table = {float(x): v for x, v in zip(X5[:, 0], values)}
    return lambda X: np.array([table[float(x)] for x in X[:, 0]])


def _hand_nuisance():
    m0, m1 = _table_lookup(MU0), _table_lookup(MU1)
    return NuisanceFit("II", CallablePropensity(_table_lookup(PI5)),
                       CallableOutcome(lambda X, a: np.where(a > 0, m1(X), m0(X))))


def _brute_force(weights=None):
    total = 0.0
    for i in range(5):
        d = 1 if -0.5 + X5[i, 0] > 0 else 0
        mu = MU1[i] if d == 1 else MU0[i]
        varrho = PI5[i] if A5[i] == 1 else 1 - PI5[i]
        term = (Y5[i] - mu) / varrho + mu if A5[i] == d else mu
        total += term * (0.2 if weights is None else weights[i])
    return total


def test_hand_fixture_matches_brute_force():
    s = SourceSample(X=X5, A=A5, Y=Y5)
    assert aipw_value(s, RULE5, _hand_nuisance()) == pytest.approx(_brute_force(), abs=1e-12)
    w = np.array([0.1, 0.3, 0.2, 0.25, 0.15])
    assert aipw_value(s, RULE5, _hand_nuisance(), w) == pytest.approx(_brute_force(w), abs=1e-12)


def test_target_evaluation_hand_fixture():
    t = TargetSample(X=X5, A=A5, Y=Y5)
    est = evaluate_on_target(t, RULE5, _hand_nuisance())
    assert est.value == pytest.approx(_brute_force(), abs=1e-12)


def test_uniform_weights_equal_original():
    s = gen_source(1, "observational", 400, np.random.default_rng(0))
    fit = fit_nuisance(s, "I")
    assert aipw_value(s, RULE, fit, np.full(400, 1 / 400)) == pytest.approx(
        aipw_value(s, RULE, fit), abs=1e-12)


def test_weight_length_checked():
    s = gen_source(1, "observational", 100, np.random.default_rng(0))
    with pytest.raises(LengthMismatch):
        aipw_value(s, RULE, fit_nuisance(s, "I"), np.full(99, 1 / 99))


def test_constant_outcome_value():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 3))
    A = rng.binomial(1, 0.5, 200)
    s = SourceSample(X=X, A=A, Y=np.full(200, 3.0))
    fit = fit_nuisance(s, "I")
    assert aipw_value(s, RULE, fit) == pytest.approx(3.0, abs=1e-10)


def test_degenerate_sample_has_zero_se():
    rng = np.random.default_rng(2)
    n = 300
    X = rng.normal(size=(n, 3))
    A = rng.binomial(1, 0.5, n)
    s = SourceSample(X=X, A=A, Y=np.full(n, 2.0))
    fit = fit_nuisance(s, "I")
    G = build_constraint_matrix(X, _spec_at(X.mean(axis=0))).G
    sol = calibrate(G, CalibrationConfig(gamma=0.0))
    np.testing.assert_allclose(sol.lambda_hat, 0.0, atol=1e-12)
    est = variance_parametric(s, RULE, fit, sol)
    assert est.value == pytest.approx(2.0, abs=1e-10)
    assert np.max(np.abs(est.xi)) <= 1e-9
    assert est.se <= 1e-9


def _spec_at(targets):
    from calitr.core import ConstraintSpec
    return ConstraintSpec.means(targets)


def test_se_identity_and_interval():
    s = gen_source(2, "observational", 500, np.random.default_rng(3))
    fit = fit_nuisance(s, "I")
    G = build_constraint_matrix(s.X, _spec_at(TARGET_MEANS[2])).G
    est = variance_parametric(s, RULE, fit, calibrate(G, CalibrationConfig(gamma=0.0)))
    assert est.xi.shape == (500, 4)
    assert est.se >= 0
    assert abs(est.se ** 2 * est.n - np.mean(est.xi.sum(axis=1) ** 2)) <= 1e-10
    lo, hi = est.interval
    assert (hi - lo) / 2 == pytest.approx(1.959963984540054 * est.se)
    d = est.to_dict()
    assert d["ci_lower"] == pytest.approx(lo) and d["mode"] == "I"


def test_uniform_nonparametric_se_is_plain_variance():
    s = gen_source(1, "observational", 300, np.random.default_rng(4))
    fit = fit_nuisance(s, "II", seed=0)
    est = variance_nonparametric(s, RULE, fit, None)
    po = PseudoOutcomes.from_fit(s, fit)
    p = po.psi(RULE.decide(s.X))
    assert est.se ** 2 == pytest.approx(np.sum((p - p.mean()) ** 2) / 300 ** 2, rel=1e-12)
    assert est.xi.shape == (300, 2)


def test_weight_gradient_at_zero_is_centered_rows():
    G = np.random.default_rng(5).normal(size=(50, 3))
    for gamma in (-1.0, 0.0, 1.0):
        np.testing.assert_allclose(weight_gradient(G, np.zeros(3), gamma),
                                   G - G.mean(axis=0), atol=1e-12)


def test_target_equal_to_source_matches_aipw():
    s = gen_source(1, "randomized", 300, np.random.default_rng(6))
    fit = fit_nuisance(s, "II", seed=0)
    t = TargetSample(X=s.X, A=s.A, Y=s.Y)
    assert evaluate_on_target(t, RULE, fit).value == pytest.approx(aipw_value(s, RULE, fit), abs=1e-12)


def test_rule_and_negation_split_indicators():
    s = gen_source(1, "randomized", 300, np.random.default_rng(7))
    d = RULE.decide(s.X)
    dn = (-RULE).decide(s.X)
    match = (s.A == d).astype(int) + (s.A == dn).astype(int)
    np.testing.assert_array_equal(match[d != dn], 1)


def test_default_target_evaluation_runs():
    rng = np.random.default_rng(8)
    s = gen_source(1, "observational", 400, rng)
    est = evaluate_on_target(TargetSample(X=s.X, A=s.A, Y=s.Y), RULE, seed=0)
    assert np.isfinite(est.value) and est.se > 0


def test_singular_matrix_reported():
    with pytest.raises(SingularG) as info:
        _solve(np.array([[1.0, 1.0], [1.0, 1.0]]), np.ones(2), "G_lambda")
    assert info.value.condition_number > 1e12


def test_solve_residual_small():
    rng = np.random.default_rng(9)
    M = rng.normal(size=(4, 4))
    M = M @ M.T + np.eye(4)
    b = rng.normal(size=4)
    x = _solve(M, b, "M")
    assert np.linalg.norm(M @ x - b) <= 1e-8 * np.linalg.norm(b)


# ----------------------------------------------- finite-difference oracle


@pytest.fixture(scope="module")
def fd_fixture():
    s = gen_source(2, "observational", 200, np.random.default_rng(10))
    fit = fit_nuisance(s, "I")
    G = build_constraint_matrix(s.X, _spec_at(TARGET_MEANS[2])).G
    sol = calibrate(G, CalibrationConfig(gamma=0.0))
    return s, fit, G, sol


def _fd(f, x, h=1e-6):
    cols = []
    for e in np.eye(x.shape[0]):
        cols.append((np.asarray(f(x + h * e)) - np.asarray(f(x - h * e))) / (2 * h))
    return np.column_stack(cols)


def _close(a, b):
    np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4 * np.max(np.abs(b)))


@pytest.mark.parametrize("gamma", [-1.0, 0.0, 1.0])
def test_lambda_matrices_match_finite_differences(fd_fixture, gamma):
    s, fit, G, _ = fd_fixture
    sol = calibrate(G, CalibrationConfig(gamma=gamma, stabilization=None))
    po = PseudoOutcomes.from_fit(s, fit)
    p = po.psi(RULE.decide(s.X))
    H, Gl = lambda_matrices(sol, p)

    def value(lam):
        return compute_weights(G, lam, CalibrationConfig(gamma=gamma, stabilization=None)).W @ p / 200

    def moment(lam):
        return rho(G @ lam, gamma) @ G / 200

    _close(H, _fd(lambda lam: [value(lam)], sol.lambda_hat).ravel())
    _close(Gl, -_fd(moment, sol.lambda_hat))


def test_theta_matrices_match_finite_differences(fd_fixture):
    s, fit, _, sol = fd_fixture
    d = RULE.decide(s.X).astype(float)
    po = PseudoOutcomes.from_fit(s, fit)
    H, Gt = theta_matrices(po, d, fit.outcome, sol.W)

    def value(theta):
        return [sol.W @ PseudoOutcomes.from_fit(s, fit.with_params(theta=theta)).psi(d) / 200]

    def moment(theta):
        return fit.outcome.with_params(theta).moment(s.X, s.A, s.Y).mean(axis=0)

    _close(H, _fd(value, fit.theta_hat).ravel())
    _close(Gt, -_fd(moment, fit.theta_hat))


def test_eta_matrices_match_finite_differences(fd_fixture):
    s, fit, _, sol = fd_fixture
    d = RULE.decide(s.X).astype(float)
    po = PseudoOutcomes.from_fit(s, fit)
    H, Ge = eta_matrices(po, d, fit.propensity, sol.W)

    def value(eta):
        return [sol.W @ PseudoOutcomes.from_fit(s, fit.with_params(eta=eta)).psi(d) / 200]

    def score(eta):
        return fit.propensity.with_params(eta).score(s.X, s.A).mean(axis=0)

    _close(H, _fd(value, fit.eta_hat).ravel())
    _close(Ge, -_fd(score, fit.eta_hat))


# --------------------------------------------------- replication properties


def _fixed_rule_study(scenario, reps, n, seed, calibrated=True, mode="I"):
    vals, ses, orig = [], [], []
    spec = _spec_at(TARGET_MEANS[scenario])
    for r in range(reps):
        s = gen_source(scenario, "observational", n, np.random.default_rng([seed, r]))
        fit = fit_nuisance(s, mode, seed=r)
        sol = calibrate(build_constraint_matrix(s.X, spec), CalibrationConfig(gamma=0.0))
        est = variance_parametric(s, RULE, fit, sol) if mode == "I" else \
            variance_nonparametric(s, RULE, fit, sol)
        vals.append(est.value)
        ses.append(est.se)
        orig.append(aipw_value(s, RULE, fit))
    return np.array(vals), np.array(ses), np.array(orig)


@pytest.fixture(scope="module")
def scenario_one_study():
    return _fixed_rule_study(1, 200, 1000, 11)


def test_mean_se_tracks_replication_sd(scenario_one_study):
    vals, ses, _ = scenario_one_study
    assert abs(ses.mean() / vals.std(ddof=1) - 1) <= 0.25


def test_calibration_does_not_inflate_sd(scenario_one_study):
    vals, _, orig = scenario_one_study
    sd_orig = orig.std(ddof=1)
    mc_se = sd_orig / np.sqrt(2 * (len(orig) - 1))
    assert vals.std(ddof=1) <= sd_orig + 2 * mc_se


@pytest.fixture(scope="module")
def scenario_two_truth():
    X = target_covariates(2, 1_000_000, np.random.default_rng(12))
    return true_value_mc(RULE, X)


def _double_robust_run(arm):
    spec = _spec_at(TARGET_MEANS[2])
    vals = []
    for r in range(100):
        s = gen_source(2, "observational", 4000, np.random.default_rng([13, r]))
        if arm == "true_propensity":
            fit = NuisanceFit("II", CallablePropensity(lambda X: propensity(X, "observational")),
                              fit_linear_outcome(s))
        else:
            fit = NuisanceFit("II", ConstantPropensity(0.5), fit_forest_outcome(s, seed=r))
        sol = calibrate(build_constraint_matrix(s.X, spec), CalibrationConfig(gamma=0.0))
        vals.append(aipw_value(s, RULE, fit, sol))
    return np.array(vals)


@pytest.mark.parametrize("arm", ["true_propensity", "forest_outcome"])
def test_double_robustness(arm, scenario_two_truth):
    vals = _double_robust_run(arm)
    mc_se = vals.std(ddof=1) / np.sqrt(len(vals))
    assert abs(vals.mean() - scenario_two_truth) <= 3 * mc_se
