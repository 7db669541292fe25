"""Propensity score and outcome regression fits.

Two implementation modes are supported:

* ``"I"`` (parametric): logistic propensity and a linear outcome model on the
  design (1, X, A, A*X). Both expose their estimating-equation pieces so the
  value module can propagate their estimation error.
* ``"II"`` (nonparametric): an additive kernel smoother for the propensity and
  one random forest per treatment arm for the outcome.
"""

import logging
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import optimize
from scipy.special import expit, logit
from sklearn.ensemble import RandomForestRegressor

from .core import SourceSample, add_intercept
from .exceptions import (
    RankDeficient,
    Separation,
    SeparationWarning,
    TooFewObservations,
    ValidationError,
)

logger = logging.getLogger(__name__)

PROPENSITY_CLIP = 0.01
RIDGE_FALLBACK = 1e-6
MIN_SMOOTHER_ROWS = 20
MIN_FOREST_ROWS = 20

PARAMETRIC = "I"
NONPARAMETRIC = "II"


def _mode(mode):
    m = str(mode).upper()
    if m in ("I", "1", "PARAMETRIC", "PARAMETRICI"):
        return PARAMETRIC
    if m in ("II", "2", "NONPARAMETRIC", "NONPARAMETRICII"):
        return NONPARAMETRIC
    raise ValidationError(f"unknown nuisance mode {mode!r}; expected 'I' or 'II'")


def clip_propensity(p):
    return np.clip(p, PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)


def n_threads():
    """Worker cap from ``CALITR_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("CALITR_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- propensity


@dataclass(frozen=True)
class ConstantPropensity:
    """pi(x) = value for every x (e.g. a known randomization probability)."""

    value: float = 0.5

    def __post_init__(self):
        if not 0 < self.value < 1:
            raise ValidationError("constant propensity must lie in (0, 1)")

    def predict(self, X):
        return np.full(np.asarray(X).shape[0], clip_propensity(self.value))

    def to_dict(self):
        return {"kind": "constant", "value": self.value}


@dataclass(frozen=True)
class CallablePropensity:
    """Wrap a user function x -> pi(x); outputs are clipped."""

    fn: Callable

    def predict(self, X):
        return clip_propensity(np.asarray(self.fn(np.asarray(X, dtype=float)), dtype=float))

    def to_dict(self):
        return {"kind": "callable"}


def _separated(Xt, A, tol=1e-7):
    """LP check for (quasi-)complete separation.

    Looks for a nonzero direction b with (2A_i - 1) Xt_i b >= 0 for all i;
    the maximum of the summed margins is positive exactly when one exists.
    """
    s = (2.0 * A - 1.0)[:, None] * Xt
    k = Xt.shape[1]
    res = optimize.linprog(-s.sum(axis=0), A_ub=-s, b_ub=np.zeros(len(A)),
                           bounds=[(-1, 1)] * k, method="highs")
    return res.status == 0 and -res.fun > tol


@dataclass(frozen=True)
class LogisticPropensity:
    """Fitted logistic model logit pi(x) = eta^T (1, x).

    ``ridge`` is nonzero only when the fit fell back to a penalized solution
    after detecting separation.
    """

    eta: np.ndarray
    ridge: float = 0.0
    n_iter: int = 0
    gradient_norm: float = 0.0

    def linear_predictor(self, X):
        return add_intercept(X) @ self.eta

    def raw_predict(self, X):
        return expit(self.linear_predictor(X))

    def predict(self, X):
        return clip_propensity(self.raw_predict(X))

    def score(self, X, A):
        """Per-observation score S_i = (1, X_i) (A_i - expit(eta^T (1, X_i)))."""
        Xt = add_intercept(X)
        return Xt * (np.asarray(A, dtype=float) - expit(Xt @ self.eta))[:, None]

    def information(self, X):
        """G_eta = n^-1 sum (1, X_i)(1, X_i)^T pi_i (1 - pi_i)."""
        Xt = add_intercept(X)
        p = expit(Xt @ self.eta)
        return (Xt * (p * (1 - p))[:, None]).T @ Xt / Xt.shape[0]

    def gradient(self, X):
        """d pi_clipped / d eta, zero where the clip is active."""
        Xt = add_intercept(X)
        p = expit(Xt @ self.eta)
        active = (p > PROPENSITY_CLIP) & (p < 1 - PROPENSITY_CLIP)
        return Xt * (p * (1 - p) * active)[:, None]

    def with_params(self, eta):
        return replace(self, eta=np.asarray(eta, dtype=float))

    def to_dict(self):
        return {"kind": "logistic", "eta": [float(v) for v in self.eta],
                "ridge": self.ridge}


def fit_logistic(sample, on_separation="ridge", tol=1e-10, max_iter=100):
    """Maximum-likelihood logistic regression of A on (1, X) by Newton/IRLS.

    Parameters
    ----------
    sample : SourceSample
    on_separation : {"ridge", "raise"}
        With ``"ridge"`` a separated design is refit with a 1e-6 ridge penalty
        and a :class:`SeparationWarning` is issued; ``"raise"`` raises
        :class:`Separation`.

    Returns
    -------
    LogisticPropensity
    """
    X, A = sample.X, sample.A.astype(float)
    Xt = add_intercept(X)
    n, k = Xt.shape

    def newton(ridge):
        eta = np.zeros(k)
        eta[0] = logit(np.clip(A.mean(), 1e-6, 1 - 1e-6))
        for it in range(max_iter):
            p = expit(Xt @ eta)
            grad = Xt.T @ (A - p) / n - ridge * eta / n
            gnorm = np.max(np.abs(grad))
            if gnorm <= tol:
                return eta, it, gnorm, True
            H = (Xt * (p * (1 - p))[:, None]).T @ Xt / n + ridge * np.eye(k) / n
            try:
                step = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H, grad, rcond=None)[0]

            def nll(e):
                z = Xt @ e
                return (np.sum(np.logaddexp(0, z) - A * z) + 0.5 * ridge * e @ e) / n

            f0, t = nll(eta), 1.0
            decrease = grad @ step
            # near the optimum the objective change is below rounding; take the full step
            if decrease > 1e-13 * max(1.0, abs(f0)):
                while t > 1e-10 and nll(eta + t * step) > f0 - 1e-4 * t * decrease:
                    t *= 0.5
            eta = eta + t * step
            if np.max(np.abs(eta)) > 50 and ridge == 0:
                return eta, it, gnorm, False
        p = expit(Xt @ eta)
        gnorm = np.max(np.abs(Xt.T @ (A - p) / n - ridge * eta / n))
        return eta, max_iter, gnorm, gnorm <= tol

    eta, it, gnorm, ok = newton(0.0)
    if ok and np.max(np.abs(eta)) < 30:
        return LogisticPropensity(eta, 0.0, it, float(gnorm))
    if not _separated(Xt, A):
        if ok:
            return LogisticPropensity(eta, 0.0, it, float(gnorm))
        raise Separation(f"logistic fit did not converge (gradient {gnorm:.2e})")
    msg = "treatment is (quasi-)completely separated by the covariates"
    if on_separation == "raise":
        raise Separation(msg)
    warnings.warn(msg + f"; refitting with ridge {RIDGE_FALLBACK:g}", SeparationWarning)
    max_iter = max(max_iter, 500)
    eta, it, gnorm, _ = newton(RIDGE_FALLBACK)
    return LogisticPropensity(eta, RIDGE_FALLBACK, it, float(gnorm))


@dataclass(frozen=True)
class KernelPropensity:
    """Additive Nadaraya-Watson smoother on the logit scale.

    logit pi(x) = logit(Abar) + sum_j {logit m_j(x_j) - logit(Abar)}, where m_j
    is a Gaussian-kernel regression of A on covariate j alone.
    """

    X: np.ndarray = field(repr=False)
    A: np.ndarray = field(repr=False)
    bandwidths: np.ndarray
    components: tuple
    base_rate: float

    def _component(self, j, h, x, chunk=2048):
        xs = self.X[:, j]
        out = np.empty(x.shape[0])
        for s in range(0, x.shape[0], chunk):
            u = (x[s:s + chunk, None] - xs[None, :]) / h
            K = np.exp(-0.5 * u * u)
            den = K.sum(axis=1)
            num = K @ self.A
            safe = den > 1e-300
            out[s:s + chunk] = np.where(safe, num / np.where(safe, den, 1.0), self.base_rate)
        return out

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        base = logit(self.base_rate)
        z = np.full(X.shape[0], base)
        for j, h in zip(self.components, self.bandwidths):
            m = clip_propensity(self._component(j, h, X[:, j]))
            z += logit(m) - base
        return clip_propensity(expit(z))

    def to_dict(self):
        return {"kind": "kernel", "components": list(self.components),
                "bandwidths": [float(h) for h in self.bandwidths],
                "base_rate": self.base_rate,
                "X": self.X.tolist(), "A": self.A.tolist()}


def fit_kernel_propensity(sample, bandwidth_factor=1.06):
    """Fit :class:`KernelPropensity` with h_j = 1.06 sd_j n^(-1/5).

    Covariates with zero variance carry no information and are dropped.
    """
    n = sample.n
    if n < MIN_SMOOTHER_ROWS:
        raise TooFewObservations(f"kernel propensity needs at least {MIN_SMOOTHER_ROWS} rows, got {n}")
    sd = sample.X.std(axis=0, ddof=1)
    comps = tuple(int(j) for j in np.flatnonzero(sd > 0))
    if len(comps) < sample.p:
        logger.info("kernel propensity: dropping constant covariates %s",
                    sorted(set(range(sample.p)) - set(comps)))
    h = bandwidth_factor * sd[list(comps)] * n ** (-0.2)
    A = sample.A.astype(float)
    return KernelPropensity(np.array(sample.X), A, h, comps,
                            float(np.clip(A.mean(), PROPENSITY_CLIP, 1 - PROPENSITY_CLIP)))


# ------------------------------------------------------------------- outcome


def outcome_design(X, A):
    """Design rows (1, X, A, A*X) for each observation."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    A = np.asarray(A, dtype=float).reshape(-1, 1)
    Xt = add_intercept(X)
    return np.hstack([Xt, A * Xt])


@dataclass(frozen=True)
class LinearOutcome:
    """Linear model mu(x, a) = Z(x, a)^T theta with Z = (1, x, a, a x)."""

    theta: np.ndarray

    def predict(self, X, a):
        a = np.broadcast_to(np.asarray(a, dtype=float), (np.asarray(X).shape[0],))
        return outcome_design(X, a) @ self.theta

    def design(self, X, a):
        a = np.broadcast_to(np.asarray(a, dtype=float), (np.asarray(X).shape[0],))
        return outcome_design(X, a)

    def moment(self, X, A, Y):
        """Per-observation normal-equation terms C_i = Z_i (Y_i - Z_i^T theta)."""
        Z = outcome_design(X, A)
        return Z * (np.asarray(Y, dtype=float) - Z @ self.theta)[:, None]

    def information(self, X, A):
        """G_theta = n^-1 sum Z_i Z_i^T."""
        Z = outcome_design(X, A)
        return Z.T @ Z / Z.shape[0]

    def with_params(self, theta):
        return replace(self, theta=np.asarray(theta, dtype=float))

    def to_dict(self):
        return {"kind": "linear", "theta": [float(v) for v in self.theta]}


def fit_linear_outcome(sample):
    """Least squares of Y on (1, X, A, A*X).

    Raises
    ------
    RankDeficient
        The design does not have full column rank.
    """
    Z = outcome_design(sample.X, sample.A)
    rank = np.linalg.matrix_rank(Z)
    if rank < Z.shape[1]:
        raise RankDeficient(f"outcome design has rank {rank} < {Z.shape[1]} columns")
    theta = np.linalg.lstsq(Z, sample.Y, rcond=None)[0]
    return LinearOutcome(theta)


@dataclass(frozen=True)
class ForestOutcome:
    """One regression forest per treatment arm."""

    forest0: RandomForestRegressor = field(repr=False)
    forest1: RandomForestRegressor = field(repr=False)
    seed: Optional[int] = None

    def predict(self, X, a):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        a = np.broadcast_to(np.asarray(a), (X.shape[0],))
        out = np.empty(X.shape[0])
        for arm, forest in ((0, self.forest0), (1, self.forest1)):
            rows = a == arm
            if rows.any():
                out[rows] = forest.predict(X[rows])
        return out

    def oob_mse(self, arm):
        forest = self.forest1 if arm == 1 else self.forest0
        pred = forest.oob_prediction_
        y = forest._calitr_y
        return float(np.mean((pred - y) ** 2))

    def to_dict(self):
        return {"kind": "forest", "seed": self.seed}


def fit_forest_arm(X, Y, seed=None, n_trees=200, min_leaf=5, oob=False):
    """Regression forest for one arm.

    200 bootstrap trees, ceil(p/3) split candidates, leaves of at least 5
    rows. Deterministic given ``seed``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < MIN_FOREST_ROWS:
        raise TooFewObservations(
            f"forest needs at least {MIN_FOREST_ROWS} rows per arm, got {X.shape[0]}")
    forest = RandomForestRegressor(
        n_estimators=n_trees, max_features=int(math.ceil(X.shape[1] / 3)),
        min_samples_leaf=min_leaf, bootstrap=True, oob_score=oob,
        random_state=seed, n_jobs=n_threads())
    forest.fit(X, Y)
    forest._calitr_y = np.asarray(Y, dtype=float)
    return forest


def fit_forest_outcome(sample, seed=None, n_trees=200, min_leaf=5, oob=False):
    """Fit one forest per arm; arm 1 uses a seed derived from arm 0's."""
    seeds = np.random.SeedSequence(seed).generate_state(2)
    forests = []
    for arm, s in zip((0, 1), seeds):
        X, Y = sample.arm(arm)
        forests.append(fit_forest_arm(X, Y, int(s), n_trees, min_leaf, oob))
    return ForestOutcome(forests[0], forests[1], seed)


@dataclass(frozen=True)
class CallableOutcome:
    """Wrap a user function (X, a) -> mu(x, a)."""

    fn: Callable

    def predict(self, X, a):
        X = np.asarray(X, dtype=float)
        a = np.broadcast_to(np.asarray(a), (X.shape[0],))
        return np.asarray(self.fn(X, a), dtype=float)

    def to_dict(self):
        return {"kind": "callable"}


# ------------------------------------------------------------------ combined


@dataclass(frozen=True)
class NuisanceFit:
    """Propensity and outcome models plus the mode that selects the variance formula."""

    mode: str
    propensity: object
    outcome: object

    def __post_init__(self):
        object.__setattr__(self, "mode", _mode(self.mode))

    @property
    def eta_hat(self):
        return getattr(self.propensity, "eta", None)

    @property
    def theta_hat(self):
        return getattr(self.outcome, "theta", None)

    @property
    def is_parametric(self):
        return isinstance(self.propensity, LogisticPropensity) and isinstance(
            self.outcome, LinearOutcome)

    def predict_propensity(self, X):
        return self.propensity.predict(X)

    def predict_outcome(self, X, a):
        return self.outcome.predict(X, a)

    def with_params(self, eta=None, theta=None):
        prop, out = self.propensity, self.outcome
        if eta is not None:
            prop = prop.with_params(eta)
        if theta is not None:
            out = out.with_params(theta)
        return NuisanceFit(self.mode, prop, out)

    def to_dict(self):
        return {"mode": self.mode, "propensity": self.propensity.to_dict(),
                "outcome": self.outcome.to_dict()}


def fit_nuisance(sample, mode=PARAMETRIC, seed=None, propensity=None, outcome=None,
                 on_separation="ridge"):
    """Fit both nuisance models for the given mode.

    ``propensity`` or ``outcome`` may be supplied pre-built (for example a
    :class:`ConstantPropensity` for a randomized design) to replace the
    default fit for that component.
    """
    if not isinstance(sample, SourceSample):
        raise ValidationError("fit_nuisance expects a SourceSample")
    mode = _mode(mode)
    if propensity is None:
        propensity = (fit_logistic(sample, on_separation=on_separation)
                      if mode == PARAMETRIC else fit_kernel_propensity(sample))
    if outcome is None:
        outcome = (fit_linear_outcome(sample) if mode == PARAMETRIC
                   else fit_forest_outcome(sample, seed=seed))
    return NuisanceFit(mode, propensity, outcome)
