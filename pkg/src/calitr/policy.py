"""Search over linear treatment rules on the unit sphere.

The estimated value of a linear rule depends on beta only through the
decisions it makes, so it is a piecewise-constant function of beta. Two
searchers are provided: a seeded genetic algorithm for learning, and an
exhaustive spherical grid (with optional local refinement) used to compute
reference optima.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .calibration import CalibrationConfig, calibrate, resolve_stabilization
from .core import (
    ConstraintSpec,
    LinearRule,
    as_sample,
    build_constraint_matrix,
    normalize,
)
from .exceptions import DimensionMismatch, DimensionTooLarge, ValidationError
from .nuisance import ConstantPropensity, fit_linear_outcome, fit_nuisance
from .value import PseudoOutcomes, variance_nonparametric, variance_parametric

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaConfig:
    """Genetic algorithm settings.

    Mutation is Gaussian with standard deviation ``mutation_scale`` at the
    first generation, shrinking linearly to a tenth of that by the last.
    """

    population_size: int = 100
    generations: int = 150
    crossover_rate: float = 0.8
    mutation_scale: float = 0.2
    elitism_count: int = 2
    seed: int = 0
    restarts: int = 3
    tournament_size: int = 3

    def __post_init__(self):
        if self.population_size < 4:
            raise ValidationError("population_size must be at least 4")
        if not 0 <= self.crossover_rate <= 1:
            raise ValidationError("crossover_rate must lie in [0, 1]")
        if self.mutation_scale < 0:
            raise ValidationError("mutation_scale must be non-negative")
        if not 0 <= self.elitism_count < self.population_size:
            raise ValidationError("elitism_count must be in [0, population_size)")
        if self.generations < 0 or self.restarts < 1:
            raise ValidationError("generations must be >= 0 and restarts >= 1")


@dataclass(frozen=True)
class SearchResult:
    rule: LinearRule
    value: float
    evaluations: int


def _rank(values, pop):
    """Indices ordered by value descending, then lexicographically smaller beta."""
    keys = [pop[:, j] for j in range(pop.shape[1] - 1, -1, -1)] + [-values]
    return np.lexsort(keys)


def _better(v, b, best_v, best_b):
    if best_b is None or v > best_v:
        return True
    if v < best_v:
        return False
    return tuple(b) < tuple(best_b)


def _evaluator(value_fn, vectorized):
    if vectorized:
        return lambda B: np.asarray(value_fn(B), dtype=float).reshape(-1)
    return lambda B: np.array([float(value_fn(LinearRule(b))) for b in B])


def _random_unit(rng, m, k):
    B = rng.standard_normal((m, k))
    return normalize(B)


def ga_optimize(value_fn, p, config=None, vectorized=False, initial=None):
    """Maximize ``value_fn`` over unit vectors in R^(p+1) with a genetic algorithm.

    Parameters
    ----------
    value_fn : callable
        With ``vectorized=False`` it maps a :class:`LinearRule` to a float;
        with ``vectorized=True`` it maps an (m, p+1) array of unit rows to m
        values.
    p : int
        Number of covariates.
    config : GaConfig
    initial : array-like, optional
        Rows seeded into the first population of every restart.

    Returns
    -------
    SearchResult
        Best candidate seen across all restarts.
    """
    config = config or GaConfig()
    k = p + 1
    evaluate = _evaluator(value_fn, vectorized)
    m = config.population_size
    best_v, best_b, n_eval = -math.inf, None, 0
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    init = None if initial is None else normalize(np.atleast_2d(np.asarray(initial, dtype=float)))
    if init is not None and init.shape[1] != k:
        raise DimensionMismatch(f"initial candidates must have {k} columns")

    for ss in seeds:
        rng = np.random.default_rng(ss)
        pop = _random_unit(rng, m, k)
        if init is not None:
            pop[: min(m, len(init))] = init[:m]
        vals = evaluate(pop)
        n_eval += m
        for g in range(config.generations + 1):
            order = _rank(vals, pop)
            pop, vals = pop[order], vals[order]
            if _better(vals[0], pop[0], best_v, best_b):
                best_v, best_b = float(vals[0]), pop[0].copy()
            if g == config.generations:
                break
            n_child = m - config.elitism_count
            # tournament: the lowest rank among t random entrants wins
            entrants = rng.integers(0, m, size=(2, n_child, config.tournament_size))
            parents = entrants.min(axis=2)
            p1, p2 = pop[parents[0]], pop[parents[1]]
            u = rng.uniform(-0.5, 1.5, size=(n_child, k))
            cross = rng.random(n_child) < config.crossover_rate
            child = np.where(cross[:, None], p1 + u * (p2 - p1), p1)
            scale = config.mutation_scale * (1 - 0.9 * g / max(config.generations, 1))
            child = child + scale * rng.standard_normal((n_child, k))
            norms = np.linalg.norm(child, axis=1)
            dead = norms < 1e-12
            if dead.any():
                child[dead] = _random_unit(rng, int(dead.sum()), k)
                norms[dead] = 1.0
            child = child / norms[:, None]
            pop = np.vstack([pop[: config.elitism_count], child])
            vals = np.concatenate([vals[: config.elitism_count], evaluate(child)])
            n_eval += n_child
    return SearchResult(LinearRule(best_b), best_v, n_eval)


# -------------------------------------------------------------- grid search


def sphere_grid(p, resolution):
    """Unit vectors in R^(p+1) on a product grid of hyperspherical angles."""
    k = p + 1
    steps = max(1, int(round(math.pi / resolution)))
    polar = np.linspace(0.0, math.pi, steps + 1)
    azim = np.linspace(0.0, 2 * math.pi, 2 * steps, endpoint=False)
    axes = [polar] * (k - 2) + [azim]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    return angles_to_unit(mesh)


def angles_to_unit(angles):
    """Hyperspherical angles (..., k-1) to unit vectors (..., k)."""
    angles = np.asarray(angles, dtype=float)
    k = angles.shape[-1] + 1
    out = np.empty(angles.shape[:-1] + (k,))
    sin_prod = np.ones(angles.shape[:-1])
    for j in range(k - 1):
        out[..., j] = sin_prod * np.cos(angles[..., j])
        sin_prod = sin_prod * np.sin(angles[..., j])
    out[..., k - 1] = sin_prod
    return out


def unit_to_angles(beta):
    """Inverse of :func:`angles_to_unit` for a single unit vector."""
    b = np.asarray(beta, dtype=float)
    k = b.shape[0]
    ang = np.empty(k - 1)
    for j in range(k - 1):
        tail = np.linalg.norm(b[j:])
        ang[j] = math.acos(np.clip(b[j] / tail, -1, 1)) if tail > 0 else 0.0
    if b[-1] < 0:
        ang[-1] = 2 * math.pi - ang[-1]
    return ang


def _scan(evaluate, B, chunk, best):
    best_v, best_b = best
    for s in range(0, len(B), chunk):
        block = B[s:s + chunk]
        vals = evaluate(block)
        i = _rank(vals, block)[0]
        if _better(vals[i], block[i], best_v, best_b):
            best_v, best_b = float(vals[i]), block[i].copy()
    return best_v, best_b


def grid_search_sphere(value_fn, p, resolution, vectorized=True, chunk=256):
    """Exhaustive search over a product grid of hyperspherical angles.

    Polar angles take values in {0, h, ..., pi} and the last angle in
    {0, h, ..., 2 pi - h}, with h = pi / round(pi / resolution). Halving the
    resolution gives a superset of the grid.

    Raises
    ------
    DimensionTooLarge
        ``p > 3``.
    """
    if p > 3:
        raise DimensionTooLarge(f"grid search supports p <= 3, got p={p}")
    if p < 1:
        raise ValidationError("p must be at least 1")
    evaluate = _evaluator(value_fn, vectorized)
    B = sphere_grid(p, resolution)
    best_v, best_b = _scan(evaluate, B, chunk, (-math.inf, None))
    return SearchResult(LinearRule(best_b), best_v, len(B))


def refine_sphere(value_fn, start, resolution, levels=4, width=2, vectorized=True, chunk=256):
    """Local nested grid refinement around ``start``.

    Each level scans +/- ``width`` steps in every angle around the incumbent
    and then halves the step.
    """
    evaluate = _evaluator(value_fn, vectorized)
    b0 = start.beta if isinstance(start, LinearRule) else normalize(np.asarray(start, dtype=float))
    best_v = float(evaluate(b0[None, :])[0])
    best_b = b0.copy()
    step = resolution
    n_eval = 1
    offsets = np.arange(-width, width + 1)
    for _ in range(levels):
        center = unit_to_angles(best_b)
        axes = [c + step * offsets for c in center]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
        B = angles_to_unit(mesh)
        best_v, best_b = _scan(evaluate, B, chunk, (best_v, best_b))
        n_eval += len(B)
        step /= 2
    return SearchResult(LinearRule(best_b), best_v, n_eval)


# ------------------------------------------------------------------ metrics


def q_learning_rule(sample):
    """Rule from the interaction block of a linear Q-function fit.

    The fitted contrast mu(x, 1) - mu(x, 0) equals (1, x^T) theta_int, so the
    rule treats exactly when that contrast is positive.
    """
    theta = fit_linear_outcome(sample).theta
    k = sample.p + 1
    return LinearRule(theta[k:])


def pcd(rule_a, rule_b, X):
    """Share of rows in X on which the two rules agree."""
    if rule_a.p != rule_b.p:
        raise DimensionMismatch("rules have different dimensions")
    X = np.asarray(X, dtype=float)
    return float(1.0 - np.mean(np.abs(rule_a.decide(X) - rule_b.decide(X))))


# --------------------------------------------------------------- estimators


class CalibratedPolicyLearner(BaseEstimator):
    """Learn a linear treatment rule for a target population.

    Runs three steps: calibration weights matching the target summaries,
    nuisance fits on the source sample, and a genetic search maximizing the
    weighted AIPW value. With ``constraints=None`` the weights are uniform and
    the learner reduces to the unweighted AIPW method.

    Parameters
    ----------
    constraints : ConstraintSpec or None
    gamma : float, default=0
        Cressie-Read index of the calibration divergence.
    mode : {"I", "II"}, default="I"
        Parametric or nonparametric nuisance models.
    stabilization : {"default", "auto", None} or float
    propensity : float or None
        Known randomization probability; replaces the fitted propensity.
    population_size, generations, restarts : GA budget.
    random_state : int

    Attributes
    ----------
    rule_ : LinearRule
    coef_ : ndarray of shape (p + 1,)
    estimate_ : ValueEstimate
    weight_solution_ : WeightSolution or None
    nuisance_ : NuisanceFit
    """

    def __init__(self, constraints=None, gamma=0.0, mode="I", stabilization="default",
                 propensity=None, population_size=100, generations=150, restarts=3,
                 random_state=0):
        self.constraints = constraints
        self.gamma = gamma
        self.mode = mode
        self.stabilization = stabilization
        self.propensity = propensity
        self.population_size = population_size
        self.generations = generations
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X, A=None, y=None):
        sample = as_sample(X, A, y)
        seeds = np.random.SeedSequence(self.random_state).generate_state(2)
        if self.constraints is None:
            self.weight_solution_ = None
            W = None
        else:
            if not isinstance(self.constraints, ConstraintSpec):
                raise ValidationError("constraints must be a ConstraintSpec")
            config = CalibrationConfig(
                gamma=float(self.gamma),
                stabilization=resolve_stabilization(float(self.gamma), self.stabilization))
            self.weight_solution_ = calibrate(build_constraint_matrix(sample, self.constraints), config)
            W = self.weight_solution_.W
        prop = None if self.propensity is None else ConstantPropensity(float(self.propensity))
        self.nuisance_ = fit_nuisance(sample, self.mode, seed=int(seeds[0]), propensity=prop)
        po = PseudoOutcomes.from_fit(sample, self.nuisance_)
        ga = GaConfig(population_size=self.population_size, generations=self.generations,
                      restarts=self.restarts, seed=int(seeds[1]))
        self.search_ = ga_optimize(lambda B: po.values(B, W), sample.p, ga, vectorized=True)
        self.rule_ = self.search_.rule
        self.coef_ = self.rule_.beta
        if self.nuisance_.is_parametric:
            self.estimate_ = variance_parametric(sample, self.rule_, self.nuisance_,
                                                 self.weight_solution_)
        else:
            self.estimate_ = variance_nonparametric(sample, self.rule_, po, self.weight_solution_)
        self.n_features_in_ = sample.p
        return self

    def decision_function(self, X):
        return self.rule_.decision_function(X)

    def predict(self, X):
        return self.rule_.decide(X)


class QLearningRule(BaseEstimator):
    """Linear Q-learning benchmark: treat when the fitted contrast is positive."""

    def fit(self, X, A=None, y=None):
        sample = as_sample(X, A, y)
        self.rule_ = q_learning_rule(sample)
        self.coef_ = self.rule_.beta
        self.n_features_in_ = sample.p
        return self

    def decision_function(self, X):
        return self.rule_.decision_function(X)

    def predict(self, X):
        return self.rule_.decide(X)
