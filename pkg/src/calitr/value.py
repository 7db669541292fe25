"""AIPW value estimation with calibration weights and plug-in standard errors.

For a rule d and fitted nuisances the per-observation pseudo-outcome is

    psi_i = 1{A_i = d_i} / varrho_i * (Y_i - mu_d,i) + mu_d,i,

with varrho_i = pi_i A_i + (1 - pi_i)(1 - A_i). Because psi depends on the
rule only through d_i, it is precomputed for both arms (``psi0``/``psi1``) and
selected per rule, which makes evaluating many candidate rules cheap.

The standard error sums up to four influence terms: the weighted
pseudo-outcome itself, the estimation of the calibration multiplier, and (in
parametric mode) the outcome and propensity parameters.
"""

from dataclasses import dataclass

import numpy as np

from .calibration import WeightSolution, rho, rho_prime, weight_gradient
from .core import LinearRule, SourceSample, add_intercept
from .exceptions import LengthMismatch, SingularG, ValidationError
from .nuisance import (
    NONPARAMETRIC,
    PARAMETRIC,
    NuisanceFit,
    fit_forest_outcome,
    fit_logistic,
    outcome_design,
)

CONDITION_LIMIT = 1e12
Z_95 = 1.959963984540054


def psi(y, a, decision, propensity, mu0, mu1):
    """Vectorized AIPW pseudo-outcome for given decisions and nuisance values."""
    y, a, d = (np.asarray(v, dtype=float) for v in (y, a, decision))
    pi = np.asarray(propensity, dtype=float)
    mu_d = np.where(d > 0, mu1, mu0)
    varrho = pi * a + (1 - pi) * (1 - a)
    return (a == d) / varrho * (y - mu_d) + mu_d


@dataclass(frozen=True)
class PseudoOutcomes:
    """Nuisance predictions at the sample points and the per-arm pseudo-outcomes."""

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    pi: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    psi0: np.ndarray
    psi1: np.ndarray

    @classmethod
    def from_fit(cls, sample, nuisance):
        X, A, Y = sample.X, sample.A.astype(float), sample.Y
        pi = np.asarray(nuisance.predict_propensity(X), dtype=float)
        mu0 = np.asarray(nuisance.predict_outcome(X, 0), dtype=float)
        mu1 = np.asarray(nuisance.predict_outcome(X, 1), dtype=float)
        psi0 = (1 - A) / (1 - pi) * (Y - mu0) + mu0
        psi1 = A / pi * (Y - mu1) + mu1
        return cls(X, A, Y, pi, mu0, mu1, psi0, psi1)

    @property
    def n(self):
        return self.Y.shape[0]

    def psi(self, decisions):
        return np.where(np.asarray(decisions) > 0, self.psi1, self.psi0)

    def values(self, betas, W=None):
        """Estimated values for a batch of rule vectors (rows of ``betas``).

        ``W`` are the n-scaled weights (mean one); ``None`` means uniform.
        """
        betas = np.atleast_2d(np.asarray(betas, dtype=float))
        D = (add_intercept(self.X) @ betas.T > 0)
        W = np.ones(self.n) if W is None else np.asarray(W, dtype=float)
        base = W @ self.psi0
        return (base + (W * (self.psi1 - self.psi0)) @ D) / self.n


def _weights_array(weights, n):
    if weights is None:
        return None
    W = weights.W if isinstance(weights, WeightSolution) else n * np.asarray(weights, dtype=float)
    if W.shape[0] != n:
        raise LengthMismatch(f"weights have length {W.shape[0]}, sample has {n}")
    return W


def aipw_value(sample, rule, nuisance, weights=None):
    """Original (weights=None) or calibrated AIPW value of ``rule``.

    ``weights`` is a WeightSolution or a vector of normalized weights summing
    to one; the estimate is sum_i w_i psi_i.
    """
    po = nuisance if isinstance(nuisance, PseudoOutcomes) else PseudoOutcomes.from_fit(sample, nuisance)
    W = _weights_array(weights, po.n)
    p = po.psi(rule.decide(po.X))
    if W is None:
        return float(np.mean(p))
    return float(W @ p / po.n)


def _solve(M, b, name):
    M = 0.5 * (M + M.T)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularG(f"{name} is numerically singular (condition number {cond:.3g})", float(cond))
    return np.linalg.solve(M, b)


def lambda_matrices(solution, psi_values):
    """(H_lambda, G_lambda) at the solved multiplier.

    H_lambda = n^-1 sum (dW_i/dlambda) psi_i and
    G_lambda = -n^-1 sum rho'(lambda^T G_i) G_i G_i^T.
    """
    G, lam, gamma = solution.G, solution.lambda_hat, solution.gamma
    n = G.shape[0]
    dW = weight_gradient(G, lam, gamma)
    H = dW.T @ psi_values / n
    rp = rho_prime(G @ lam, gamma)
    Gl = -(G * rp[:, None]).T @ G / n
    return H, Gl


def theta_matrices(po, decisions, outcome, W):
    """(H_theta, G_theta) for the linear outcome model.

    H_theta = n^-1 sum W_i (1 - 1{A_i = d_i}/varrho_i) Z(X_i, d_i).
    """
    n = po.n
    match = (po.A == decisions).astype(float)
    varrho = po.pi * po.A + (1 - po.pi) * (1 - po.A)
    Zd = outcome_design(po.X, decisions)
    H = Zd.T @ (W * (1 - match / varrho)) / n
    return H, outcome.information(po.X, po.A)


def eta_matrices(po, decisions, propensity, W):
    """(H_eta, G_eta) for the logistic propensity.

    psi depends on eta through varrho, whose derivative is
    (2A - 1) dpi/deta; the clip makes that derivative zero where active.
    """
    n = po.n
    match = (po.A == decisions).astype(float)
    varrho = po.pi * po.A + (1 - po.pi) * (1 - po.A)
    mu_d = np.where(decisions > 0, po.mu1, po.mu0)
    coef = -match / varrho ** 2 * (po.Y - mu_d) * (2 * po.A - 1)
    H = propensity.gradient(po.X).T @ (W * coef) / n
    return H, propensity.information(po.X)


@dataclass(frozen=True)
class ValueEstimate:
    """Point estimate, standard error and the per-observation influence terms.

    ``xi`` has one column per influence component (two or four).
    """

    value: float
    se: float
    xi: np.ndarray
    mode: str
    rule: LinearRule
    n: int
    calibrated: bool = True

    @property
    def variance(self):
        return self.se ** 2

    @property
    def interval(self):
        return (self.value - Z_95 * self.se, self.value + Z_95 * self.se)

    def to_dict(self):
        lo, hi = self.interval
        return {"value": float(self.value), "se": float(self.se), "n": int(self.n),
                "mode": self.mode, "calibrated": bool(self.calibrated),
                "beta": [float(b) for b in self.rule.beta],
                "ci_lower": float(lo), "ci_upper": float(hi)}


def _estimate(sample, rule, nuisance, solution, parametric):
    po = nuisance if isinstance(nuisance, PseudoOutcomes) else PseudoOutcomes.from_fit(sample, nuisance)
    n = po.n
    d = rule.decide(po.X).astype(float)
    p = po.psi(d)
    W = np.ones(n) if solution is None else _weights_array(solution, n)
    value = float(W @ p / n)
    cols = [W * p - value]
    if solution is not None:
        H, Gl = lambda_matrices(solution, p)
        r = rho(solution.G @ solution.lambda_hat, solution.gamma)
        cols.append((r[:, None] * solution.G) @ _solve(Gl, H, "G_lambda"))
    else:
        cols.append(np.zeros(n))
    if parametric:
        fit = nuisance if isinstance(nuisance, NuisanceFit) else None
        if fit is None or not fit.is_parametric:
            raise ValidationError("parametric variance needs a logistic propensity and linear outcome fit")
        H, Gt = theta_matrices(po, d, fit.outcome, W)
        cols.append(fit.outcome.moment(po.X, po.A, po.Y) @ _solve(Gt, H, "G_theta"))
        H, Ge = eta_matrices(po, d, fit.propensity, W)
        cols.append(fit.propensity.score(po.X, po.A) @ _solve(Ge, H, "G_eta"))
    xi = np.column_stack(cols)
    total = xi.sum(axis=1)
    se = float(np.sqrt(np.mean(total ** 2) / n))
    return ValueEstimate(value, se, xi, PARAMETRIC if parametric else NONPARAMETRIC,
                         rule, n, solution is not None)


def variance_parametric(sample, rule, nuisance, solution=None):
    """Value and standard error with all four influence terms (mode I).

    ``solution=None`` gives the original (unweighted) estimator, whose
    multiplier term is identically zero.
    """
    return _estimate(sample, rule, nuisance, solution, parametric=True)


def variance_nonparametric(sample, rule, nuisance, solution=None):
    """Value and standard error from the weighted pseudo-outcome and multiplier terms only (mode II)."""
    return _estimate(sample, rule, nuisance, solution, parametric=False)


def estimate_value(sample, rule, nuisance, solution=None):
    """Dispatch to the variance formula matching ``nuisance.mode``."""
    if nuisance.mode == PARAMETRIC:
        return variance_parametric(sample, rule, nuisance, solution)
    return variance_nonparametric(sample, rule, nuisance, solution)


def evaluate_on_target(target, rule, nuisance=None, seed=None):
    """AIPW value of ``rule`` computed on an individual-level target sample.

    By default the propensity is a logistic fit and the outcome model is a
    pair of forests, both fitted on the target sample itself.
    """
    if not isinstance(target, SourceSample):
        raise ValidationError("evaluate_on_target expects a TargetSample")
    if nuisance is None:
        nuisance = NuisanceFit(NONPARAMETRIC, fit_logistic(target),
                               fit_forest_outcome(target, seed=seed))
    return variance_nonparametric(target, rule, nuisance, None)


__all__ = [
    "PseudoOutcomes",
    "ValueEstimate",
    "aipw_value",
    "estimate_value",
    "eta_matrices",
    "evaluate_on_target",
    "lambda_matrices",
    "psi",
    "theta_matrices",
    "variance_nonparametric",
    "variance_parametric",
]
