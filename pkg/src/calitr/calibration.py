"""Cressie-Read calibration weights.

Weights solve

    min_w  sum_i h(w_i)   s.t.  sum_i w_i (g(X_i) - mu) = 0,  sum_i w_i = 1,

with h from the Cressie-Read family indexed by ``gamma`` (-1 empirical
likelihood, 0 entropy balancing, 1 least squares). The solution has the form
w_i proportional to rho(lambda^T G_i), where lambda solves the dual estimating
equation sum_i rho(lambda^T G_i) G_i = 0. The dual is the gradient of the
convex function F(lambda) = mean_i R(lambda^T G_i) with R' = rho, so it is
solved by damped Newton on F.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import ConstraintMatrix, ConstraintSpec, build_constraint_matrix
from .exceptions import (
    DomainViolation,
    Infeasible,
    NonPositiveWeight,
    NotConverged,
    ValidationError,
)

logger = logging.getLogger(__name__)

EMPIRICAL_LIKELIHOOD = -1.0
ENTROPY_BALANCING = 0.0
LEAST_SQUARES = 1.0

METHOD_GAMMA = {"el": EMPIRICAL_LIKELIHOOD, "eb": ENTROPY_BALANCING,
                "ls": LEAST_SQUARES}


def _domain_ok(x, gamma):
    if gamma == 0 or gamma == 1:
        return np.isfinite(x)
    return np.isfinite(x) & (1.0 + gamma * x > 0)


def _check_domain(x, gamma):
    ok = _domain_ok(x, gamma)
    if not np.all(ok):
        bad = np.asarray(x)[~ok] if np.ndim(x) else x
        raise DomainViolation(
            f"argument outside the domain of rho for gamma={gamma}: "
            f"{np.ravel(bad)[:3]}")


def rho(x, gamma):
    """Weight link: (1 - x)^-1 for gamma=-1, exp(x) for 0, (1 + gamma x)^(1/gamma) otherwise.

    ``gamma = 0`` is evaluated as the analytic limit ``exp(x)``. For
    ``gamma = 1`` the link is affine and defined everywhere (negative values
    give negative weights); other branches require ``1 + gamma x > 0``.
    """
    x = np.asarray(x, dtype=float)
    _check_domain(x, gamma)
    if gamma == 0:
        with np.errstate(over="ignore"):
            out = np.exp(x)
    elif gamma == -1:
        out = 1.0 / (1.0 - x)
    elif gamma == 1:
        out = 1.0 + x
    else:
        out = (1.0 + gamma * x) ** (1.0 / gamma)
    return out if out.ndim else float(out)


def rho_prime(x, gamma):
    """Derivative of :func:`rho` in ``x``."""
    x = np.asarray(x, dtype=float)
    _check_domain(x, gamma)
    if gamma == 0:
        with np.errstate(over="ignore"):
            out = np.exp(x)
    elif gamma == -1:
        out = 1.0 / (1.0 - x) ** 2
    elif gamma == 1:
        out = np.ones_like(x)
    else:
        out = (1.0 + gamma * x) ** (1.0 / gamma - 1.0)
    return out if out.ndim else float(out)


def _rho_integral(x, gamma):
    # antiderivative of rho; the dual objective is its sample mean
    if gamma == 0:
        with np.errstate(over="ignore"):
            return np.exp(x)
    if gamma == -1:
        return -np.log1p(-x)
    return (1.0 + gamma * x) ** (1.0 / gamma + 1.0) / (1.0 + gamma)


def default_stabilization(n):
    """Default cap parameter a_n = 12 log n."""
    return 12.0 * math.log(n)


@dataclass(frozen=True)
class CalibrationConfig:
    """Solver settings.

    ``stabilization`` is ``None`` (off), a positive float a_n, or ``"auto"``
    for a_n = 12 log n. ``tol`` bounds the max-norm of the mean dual residual
    ``n^-1 sum_i rho(lambda^T G_i) G_i``.
    """

    gamma: float = 0.0
    tol: float = 1e-10
    max_iter: int = 200
    stabilization: Optional[Union[float, str]] = None
    check_feasibility: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        s = self.stabilization
        if s is not None and s != "auto":
            if isinstance(s, str) or not float(s) > 0:
                raise ValidationError(
                    f"stabilization must be None, 'auto' or a positive number, got {s!r}")
        if not np.isfinite(self.gamma):
            raise ValidationError("gamma must be finite")

    def resolve_a_n(self, n):
        if self.stabilization is None:
            return None
        if self.stabilization == "auto":
            return default_stabilization(n)
        return float(self.stabilization)


def resolve_stabilization(gamma, option="default"):
    """Stabilization policy: ``"default"`` means 'auto' for EL and off otherwise."""
    if option == "default":
        return "auto" if gamma == EMPIRICAL_LIKELIHOOD else None
    if option in (None, "none", "off"):
        return None
    if option == "auto":
        return "auto"
    return float(option)


@dataclass(frozen=True)
class FeasibilityReport:
    """Outcome of the convex-hull interior check.

    ``margin`` is n times the largest achievable minimum weight among
    calibrating weight vectors; it is positive exactly when the origin lies in
    the relative interior of the hull of the rows of G. ``direction`` (only for
    infeasible problems) is a unit-infinity-norm u minimizing max_i u^T G_i;
    ``separation`` is that minimum (negative for strict separation, zero on the
    boundary).
    """

    feasible: bool
    margin: float
    full_rank: bool
    direction: Optional[np.ndarray] = None
    separation: Optional[float] = None


def check_feasibility(G, tol=1e-9):
    """Check whether the origin is interior to the convex hull of the rows of G.

    Solved as the linear program max t s.t. sum w_i G_i = 0, sum w_i = 1,
    w_i >= t. When the margin is not positive a second LP finds the separating
    direction.
    """
    G = G.G if isinstance(G, ConstraintMatrix) else np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    n, q = G.shape
    full_rank = np.linalg.matrix_rank(G) == q
    scale = np.max(np.abs(G), axis=0)
    scale[scale == 0] = 1.0
    Gs = G / scale

    # write n w_i = m + z_i with z_i >= 0 so only q + 1 equality rows remain and
    # every coefficient is O(1/n); variables (z_1..z_n, m), minimize -m
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_eq = np.vstack([
        np.hstack([Gs.T / n, Gs.mean(axis=0)[:, None]]),
        np.concatenate([np.full(n, 1.0 / n), [1.0]])[None, :],
    ])
    b_eq = np.concatenate([np.zeros(q), [1.0]])
    bounds = [(0, None)] * n + [(None, None)]
    for method in ("highs", "highs-ipm"):
        res = optimize.linprog(c, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method=method)
        if res.status in (0, 2):
            break
    else:
        raise NotConverged(f"feasibility linear program failed: {res.message}")
    margin = -res.fun if res.status == 0 else -math.inf
    feasible = bool(res.status == 0 and margin > tol and full_rank)
    if feasible:
        return FeasibilityReport(True, float(margin), bool(full_rank))

    # variables (u_1..u_q, s); minimize s s.t. G u <= s, |u| <= 1
    c2 = np.zeros(q + 1)
    c2[-1] = 1.0
    A2 = np.hstack([Gs, -np.ones((n, 1))])
    res2 = optimize.linprog(c2, A_ub=A2, b_ub=np.zeros(n),
                            bounds=[(-1, 1)] * q + [(None, None)], method="highs")
    direction = separation = None
    if res2.status == 0:
        u = res2.x[:q] / scale
        u = u / np.max(np.abs(u)) if np.any(u) else u
        direction = u
        separation = float(np.max(G @ u)) if np.any(u) else 0.0
    return FeasibilityReport(False, float(margin) if margin > 0 else 0.0,
                             bool(full_rank), direction, separation)


def _dual_parts(G, lam, gamma):
    x = G @ lam
    if not np.all(_domain_ok(x, gamma)):
        return None
    r = rho(x, gamma)
    if not np.all(np.isfinite(r)):
        return None
    return x, r


def solve_lambda(G, config=None):
    """Solve the dual estimating equation for lambda.

    Damped Newton on F(lambda) = mean R(lambda^T G_i), started at 0, with
    step halving that rejects any trial point leaving the domain of rho or
    failing the Armijo decrease condition. For gamma = 1 the equation is
    linear and solved in closed form.

    Raises
    ------
    NotConverged
        Residual above ``config.tol`` after ``config.max_iter`` iterations.
    DomainViolation
        No admissible step could be found.
    """
    config = config or CalibrationConfig()
    G = G.G if isinstance(G, ConstraintMatrix) else np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    n, q = G.shape
    gamma = float(config.gamma)

    if gamma == 1:
        M = G.T @ G / n
        lam = -np.linalg.solve(M, G.mean(axis=0))
        resid = np.max(np.abs(G.T @ rho(G @ lam, gamma) / n))
        if resid > max(config.tol, 1e-12 * np.max(np.abs(G))):
            lam = lam - np.linalg.lstsq(M, G.T @ rho(G @ lam, gamma) / n, rcond=None)[0]
        return lam

    lam = np.zeros(q)
    x, r = _dual_parts(G, lam, gamma)
    F = np.mean(_rho_integral(x, gamma))
    for it in range(config.max_iter):
        U = G.T @ r / n
        resid = np.max(np.abs(U))
        if resid <= config.tol:
            logger.debug("dual converged in %d iterations, residual %.2e", it, resid)
            return lam
        J = (G * rho_prime(x, gamma)[:, None]).T @ G / n
        J = 0.5 * (J + J.T)
        try:
            step = -np.linalg.solve(J, U)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(J, U, rcond=None)[0]
        slope = float(U @ step)
        if slope >= 0:
            step, slope = -U, -float(U @ U)
        t = 1.0
        while t > 1e-14:
            trial = lam + t * step
            parts = _dual_parts(G, trial, gamma)
            if parts is not None:
                F_new = np.mean(_rho_integral(parts[0], gamma))
                if np.isfinite(F_new) and F_new <= F + 1e-4 * t * slope + 1e-15 * abs(F):
                    break
                # objective changes below rounding near the root; fall back to the residual
                if np.max(np.abs(G.T @ parts[1] / n)) < 0.5 * resid:
                    break
            t *= 0.5
        else:
            if resid <= 10 * config.tol:
                return lam
            raise DomainViolation(
                f"no admissible Newton step at iteration {it} (residual {resid:.3e})")
        lam = trial
        x, r = parts
        F = F_new
    resid = np.max(np.abs(G.T @ r / n))
    if resid <= config.tol:
        return lam
    raise NotConverged(
        f"dual residual {resid:.3e} above tol {config.tol:.1e} after "
        f"{config.max_iter} iterations")


@dataclass(frozen=True)
class WeightSolution:
    """Solved calibration weights and diagnostics.

    ``weights`` sum to one; ``W = n * weights``. ``residual`` is the max-norm of
    the mean dual residual at ``lambda_hat``; ``balance`` is the max-norm of
    sum_i w_i G_i for the returned (possibly stabilized) weights. ``G`` and
    ``gamma`` are retained for the variance formulas.
    """

    lambda_hat: np.ndarray
    weights: np.ndarray
    W: np.ndarray
    residual: float
    balance: float
    feasible: bool
    has_negative: bool
    stabilized: bool
    gamma: float
    G: np.ndarray = field(repr=False)
    a_n: Optional[float] = None
    n_capped: int = 0

    @property
    def n(self):
        return self.weights.shape[0]

    def diagnostics(self):
        return {
            "gamma": self.gamma,
            "lambda_hat": [float(v) for v in self.lambda_hat],
            "residual": float(self.residual),
            "balance": float(self.balance),
            "feasible": bool(self.feasible),
            "has_negative": bool(self.has_negative),
            "stabilized": bool(self.stabilized),
            "a_n": self.a_n,
            "n_capped": int(self.n_capped),
            "n": int(self.n),
            "max_W": float(np.max(self.W)),
            "min_W": float(np.min(self.W)),
        }


def stabilize_weights(w, a_n):
    """Cap large weights via 1/w_new = 1/w + a_n for w > 1/a_n, then renormalize.

    Returns the renormalized weights and the number of capped entries.
    """
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise NonPositiveWeight("stabilization requires strictly positive weights")
    if not a_n > 0:
        raise ValidationError("a_n must be positive")
    out = w.copy()
    big = w > 1.0 / a_n
    out[big] = 1.0 / (1.0 / w[big] + a_n)
    return out / out.sum(), int(big.sum())


def compute_weights(G, lambda_hat, config=None, feasible=True):
    """Form w_i = rho(lambda^T G_i) / sum_j rho(lambda^T G_j), optionally stabilized."""
    config = config or CalibrationConfig()
    G = G.G if isinstance(G, ConstraintMatrix) else np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    n = G.shape[0]
    lam = np.asarray(lambda_hat, dtype=float).ravel()
    r = rho(G @ lam, config.gamma)
    w = r / r.sum()
    residual = float(np.max(np.abs(G.T @ r / n)))
    has_negative = bool(np.any(w < 0))
    a_n = config.resolve_a_n(n)
    n_capped = 0
    if a_n is not None:
        if has_negative:
            warnings.warn("stabilization skipped: weights contain negative values")
            a_n = None
        else:
            w, n_capped = stabilize_weights(w, a_n)
    balance = float(np.max(np.abs(w @ G)))
    return WeightSolution(
        lambda_hat=lam, weights=w, W=n * w, residual=residual, balance=balance,
        feasible=bool(feasible), has_negative=has_negative,
        stabilized=a_n is not None, gamma=float(config.gamma), G=G, a_n=a_n,
        n_capped=n_capped)


def calibrate(G, config=None):
    """Feasibility check, dual solve and weight construction in one call.

    Infeasibility is fatal for gamma <= 0 and only a warning for gamma = 1,
    whose quadratic problem stays solvable at the hull boundary.
    """
    config = config or CalibrationConfig()
    G = G.G if isinstance(G, ConstraintMatrix) else np.asarray(G, dtype=float)
    feasible = True
    if config.check_feasibility:
        report = check_feasibility(G)
        feasible = report.feasible
        if not feasible:
            msg = (f"calibration targets are not interior to the convex hull of "
                   f"g(X_i) (margin {report.margin:.3g}, direction {report.direction})")
            if config.gamma <= 0:
                raise Infeasible(msg, report)
            warnings.warn(msg)
    lam = solve_lambda(G, config)
    return compute_weights(G, lam, config, feasible=feasible)


def weight_gradient(G, lambda_hat, gamma):
    """Analytic dW_i/dlambda (n x q) for W_i = n rho_i / sum_j rho_j.

    At lambda = 0 this reduces to the centered rows G_i - mean(G).
    """
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    x = G @ np.asarray(lambda_hat, dtype=float)
    r = rho(x, gamma)
    rp = rho_prime(x, gamma)
    S = r.sum()
    dS = (rp[:, None] * G).sum(axis=0)
    return n * (rp[:, None] * G / S - np.outer(r, dS) / S ** 2)


class CalibrationWeighter(BaseEstimator):
    """Estimate calibration weights that match target moment summaries.

    Parameters
    ----------
    constraints : ConstraintSpec
        Moment functions and their target values.
    gamma : float, default=0
        Cressie-Read index: -1 empirical likelihood, 0 entropy balancing,
        1 least squares.
    stabilization : {"default", "auto", None} or float
        Weight cap a_n. ``"default"`` enables ``"auto"`` (12 log n) for
        empirical likelihood only.
    tol, max_iter : solver settings.

    Attributes
    ----------
    solution_ : WeightSolution
    weights_ : ndarray of shape (n,)
    lambda_ : ndarray of shape (q,)
    """

    def __init__(self, constraints=None, gamma=0.0, stabilization="default",
                 tol=1e-10, max_iter=200, check_feasibility=True):
        self.constraints = constraints
        self.gamma = gamma
        self.stabilization = stabilization
        self.tol = tol
        self.max_iter = max_iter
        self.check_feasibility = check_feasibility

    def _config(self):
        return CalibrationConfig(
            gamma=float(self.gamma), tol=self.tol, max_iter=self.max_iter,
            stabilization=resolve_stabilization(float(self.gamma), self.stabilization),
            check_feasibility=self.check_feasibility)

    def fit(self, X, y=None):
        if not isinstance(self.constraints, ConstraintSpec):
            raise ValidationError("constraints must be a ConstraintSpec")
        X = check_array(X, dtype=float)
        G = build_constraint_matrix(X, self.constraints)
        self.solution_ = calibrate(G, self._config())
        self.weights_ = self.solution_.weights
        self.lambda_ = self.solution_.lambda_hat
        self.norm_ = float(np.mean(rho(G.G @ self.lambda_, float(self.gamma))))
        self.n_features_in_ = X.shape[1]
        return self

    def density_ratio(self, X):
        """Fitted weight function W(x) = rho(lambda^T(g(x) - mu)) / mean_fit rho.

        Evaluated without stabilization; it estimates the density ratio of the
        (pseudo) target to the source covariate distribution.
        """
        check_is_fitted(self, "lambda_")
        X = check_array(X, dtype=float)
        G = build_constraint_matrix(X, self.constraints).G
        return rho(G @ self.lambda_, float(self.gamma)) / self.norm_
