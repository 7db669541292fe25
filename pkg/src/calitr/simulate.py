"""Covariate-shift simulation scenarios, Monte-Carlo truths and replication studies.

Covariates are X = (X1, X2, X3) with X1 binary and (X2, X3) bivariate normal
given X1. Four source/target pairs are provided:

==========  ==========================================  ====================
scenario    source                                      target
==========  ==========================================  ====================
1           X1 ~ Bern(0.5), N((-1, 0), S1)              same as source
2           X1 ~ Bern(0.5), mixture given X1            same mixture, Bern(0.8)
3           X1 ~ Bern(0.7), N((0.1, -0.2), S1)          as scenario 2 target
4           X1 ~ Bern(0.6), N((0, 0), S1)               as scenario 2 target
==========  ==========================================  ====================

The mixture draws (X2, X3) from N((1, -1), S1) when X1 = 1 and from
N((-1, 1), S2) when X1 = 0; S1 and S2 have unit variances and correlations
-0.25 and -0.3.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .calibration import METHOD_GAMMA, CalibrationConfig, calibrate, resolve_stabilization
from .core import ConstraintSpec, LinearRule, SourceSample, build_constraint_matrix
from .exceptions import CalitrError, UnsupportedScenario, ValidationError
from .nuisance import fit_nuisance
from .policy import GaConfig, ga_optimize, pcd, q_learning_rule, refine_sphere, sphere_grid
from .value import PseudoOutcomes, variance_nonparametric, variance_parametric

logger = logging.getLogger(__name__)

SIGMA1 = np.array([[1.0, -0.25], [-0.25, 1.0]])
SIGMA2 = np.array([[1.0, -0.3], [-0.3, 1.0]])
NOISE_SD = 0.5

RANDOMIZED = "randomized"
OBSERVATIONAL = "observational"

# (P(X1 = 1), normal component for X1 = 1, for X1 = 0); a component is (mean, cov)
_MIXTURE = {1: ((1.0, -1.0), SIGMA1), 0: ((-1.0, 1.0), SIGMA2)}
_SOURCE = {
    1: (0.5, {1: ((-1.0, 0.0), SIGMA1), 0: ((-1.0, 0.0), SIGMA1)}),
    2: (0.5, _MIXTURE),
    3: (0.7, {1: ((0.1, -0.2), SIGMA1), 0: ((0.1, -0.2), SIGMA1)}),
    4: (0.6, {1: ((0.0, 0.0), SIGMA1), 0: ((0.0, 0.0), SIGMA1)}),
}
_TARGET = {1: _SOURCE[1], 2: (0.8, _MIXTURE), 3: (0.8, _MIXTURE), 4: (0.8, _MIXTURE)}

TARGET_MEANS = {1: (0.5, -1.0, 0.0), 2: (0.8, 0.6, -0.6), 3: (0.8, 0.6, -0.6),
                4: (0.8, 0.6, -0.6)}

METHODS = ("eb", "el", "ls", "orig", "qlearn")


def _check_scenario(scenario):
    if scenario not in _SOURCE:
        raise UnsupportedScenario(f"scenario must be one of 1-4, got {scenario!r}")


def _design(design):
    d = str(design).lower()
    if d.startswith("rand"):
        return RANDOMIZED
    if d.startswith("obs"):
        return OBSERVATIONAL
    raise ValidationError(f"design must be 'randomized' or 'observational', got {design!r}")


def _draw(law, n, rng):
    p1, comps = law
    x1 = (rng.random(n) < p1).astype(float)
    e = rng.standard_normal((n, 2))
    z = np.empty((n, 2))
    for level in (0, 1):
        rows = x1 == level
        mean, cov = comps[level]
        z[rows] = np.asarray(mean) + e[rows] @ np.linalg.cholesky(cov).T
    return np.column_stack([x1, z])


def source_covariates(scenario, n, rng):
    _check_scenario(scenario)
    return _draw(_SOURCE[scenario], n, rng)


def target_covariates(scenario, n, rng):
    _check_scenario(scenario)
    return _draw(_TARGET[scenario], n, rng)


def treatment_effect_index(X):
    """t = X3 - X2^2 + 1; the sign of t decides whether treatment helps."""
    X = np.asarray(X, dtype=float)
    return X[:, 2] - X[:, 1] ** 2 + 1.0


def outcome_mean(X, a):
    """Noise-free outcome exp{2 - 0.1 X1 - 0.2 X2 + 0.2 X3 + a * 2 sign(t) / (2 + |t|)}."""
    X = np.asarray(X, dtype=float)
    t = treatment_effect_index(X)
    shift = 2.0 * np.sign(t) / (2.0 + np.abs(t))
    return np.exp(2.0 - 0.1 * X[:, 0] - 0.2 * X[:, 1] + 0.2 * X[:, 2]
                  + np.asarray(a, dtype=float) * shift)


def propensity(X, design):
    X = np.asarray(X, dtype=float)
    if _design(design) == RANDOMIZED:
        return np.full(X.shape[0], 0.5)
    z = 0.5 * X[:, 0] - 0.5 * X[:, 1] + 0.5 * X[:, 2]
    return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulated source draw: scenario id, treatment design, sizes and seed."""

    scenario: int
    design: str = OBSERVATIONAL
    n: int = 1000
    N_target: int = 100_000
    seed: int = 0

    def __post_init__(self):
        _check_scenario(self.scenario)
        object.__setattr__(self, "design", _design(self.design))
        if self.n < 50:
            raise ValidationError("n must be at least 50")
        if self.N_target < 10_000:
            raise ValidationError("N_target must be at least 10000")

    @property
    def constraints(self):
        return ConstraintSpec.means(TARGET_MEANS[self.scenario])


def gen_source(scenario, design, n, rng):
    X = source_covariates(scenario, n, rng)
    A = (rng.random(n) < propensity(X, design)).astype(int)
    Y = outcome_mean(X, A) + NOISE_SD * rng.standard_normal(n)
    return SourceSample(X=X, A=A, Y=Y)


def gen_scenario(spec):
    """Source sample for ``spec`` and a sampler ``f(N, rng)`` of target covariates."""
    rng = np.random.default_rng(spec.seed)
    sample = gen_source(spec.scenario, spec.design, spec.n, rng)
    return sample, (lambda N, r: target_covariates(spec.scenario, N, r))


# ------------------------------------------------------------- densities


def _bvn_pdf(z, mean, cov):
    d = z - np.asarray(mean)
    inv = np.linalg.inv(cov)
    q = np.einsum("ij,jk,ik->i", d, inv, d)
    return np.exp(-0.5 * q) / (2 * math.pi * math.sqrt(np.linalg.det(cov)))


def covariate_density(law, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p1, comps = law
    out = np.zeros(X.shape[0])
    for level, prob in ((1, p1), (0, 1 - p1)):
        rows = X[:, 0] == level
        mean, cov = comps[level]
        out[rows] = prob * _bvn_pdf(X[rows, 1:], mean, cov)
    return out


def true_density_ratio(scenario, X):
    """Target-to-source covariate density ratio; identically 1 for scenario 1."""
    _check_scenario(scenario)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if scenario == 1:
        return np.ones(X.shape[0])
    if scenario == 2:
        return 0.4 * 4.0 ** X[:, 0]
    return covariate_density(_TARGET[scenario], X) / covariate_density(_SOURCE[scenario], X)


# ---------------------------------------------------------------- truths


def true_value_mc(rule, X):
    """Noise-free mean outcome under ``rule`` over covariate draw X."""
    return float(np.mean(outcome_mean(X, rule.decide(X))))


def _oracle_values(X, W=None):
    mu0 = outcome_mean(X, 0)
    gain = outcome_mean(X, 1) - mu0
    W = np.ones(X.shape[0]) if W is None else np.asarray(W, dtype=float)
    base = float(W @ mu0)
    Xt = np.column_stack([np.ones(X.shape[0]), X])
    wg = W * gain
    N = X.shape[0]
    return lambda B: (base + wg @ (Xt @ np.atleast_2d(B).T > 0)) / N


@dataclass(frozen=True)
class Truth:
    value: float
    rule: LinearRule


def optimal_rule(X, W=None, resolution=math.radians(10), levels=4, top=5):
    """Best linear rule for the (weighted) noise-free value over draw X.

    A coarse spherical grid is followed by nested local refinement around the
    ``top`` best grid points.
    """
    value_fn = _oracle_values(X, W)
    B = sphere_grid(X.shape[1], resolution)
    vals = np.concatenate([value_fn(B[s:s + 256]) for s in range(0, len(B), 256)])
    best = None
    for i in np.lexsort((-vals,))[:top]:
        r = refine_sphere(value_fn, B[i], resolution / 2, levels=levels)
        if best is None or r.value > best.value:
            best = r
    return Truth(float(best.value), best.rule)


def target_truth(scenario, N=100_000, seed=0, resolution=math.radians(10)):
    """Optimal linear rule and its value on a target covariate draw of size N."""
    X = target_covariates(scenario, N, np.random.default_rng(seed))
    return optimal_rule(X, resolution=resolution)


def truth_for_pseudo_population(scenario, gamma, N=100_000, seed=0, constraints=None,
                                resolution=math.radians(10)):
    """Optimal value in the population implied by calibrating a large source draw.

    The source draw is calibrated to the target means with the given Cressie-Read
    index (no stabilization) and the weighted noise-free value is maximized.
    For gamma = 1 the weights may be negative and the result is the weighted
    value rather than the value of a proper population.
    """
    X = source_covariates(scenario, N, np.random.default_rng(seed))
    spec = constraints or ConstraintSpec.means(TARGET_MEANS[scenario])
    sol = calibrate(build_constraint_matrix(X, spec), CalibrationConfig(gamma=float(gamma)))
    return optimal_rule(X, sol.W, resolution=resolution)


def density_ratio_mse(scenario, indices=(1, 2, 3), gamma=0.0, N=100_000, seed=0):
    """Mean squared error of the calibration weight function against the true ratio.

    ``indices`` are the 1-based covariates whose target means are matched.
    """
    if scenario not in (2, 3, 4):
        raise UnsupportedScenario("density-ratio MSE is defined for scenarios 2-4")
    X = source_covariates(scenario, N, np.random.default_rng(seed))
    indices = tuple(int(i) for i in indices)
    targets = [TARGET_MEANS[scenario][i - 1] for i in indices]
    spec = ConstraintSpec.means(targets, indices=indices)
    sol = calibrate(build_constraint_matrix(X, spec), CalibrationConfig(gamma=float(gamma)))
    W = N * sol.weights
    return float(np.mean((W - true_density_ratio(scenario, X)) ** 2))


# ----------------------------------------------------------- replications


@dataclass
class MethodSummary:
    """Aggregates for one method across included replications.

    ``value`` is the mean estimated optimal value, ``target_value`` the mean
    true target value of the learned rules. ``cp_pseudo`` / ``cp_target`` are
    coverage percentages of the Wald interval for the pseudo-population and
    target truths.
    """

    method: str
    included: int = 0
    excluded: int = 0
    value: Optional[float] = None
    sd: Optional[float] = None
    se: Optional[float] = None
    cp_pseudo: Optional[float] = None
    cp_target: Optional[float] = None
    target_value: Optional[float] = None
    pcd: Optional[float] = None
    fixed_value: Optional[float] = None
    fixed_sd: Optional[float] = None
    fixed_se: Optional[float] = None
    errors: Dict[str, int] = field(default_factory=dict)

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "method", "included", "excluded", "value", "sd", "se", "cp_pseudo",
            "cp_target", "target_value", "pcd", "fixed_value", "fixed_sd", "fixed_se",
            "errors")}


@dataclass
class ReplicationReport:
    spec: ScenarioSpec
    mode: str
    reps: int
    methods: Dict[str, MethodSummary]
    truth_target: Truth
    truth_pseudo: Dict[str, Optional[float]]
    records: list = field(repr=False, default_factory=list)
    elapsed: float = 0.0

    def to_dict(self):
        return {
            "scenario": self.spec.scenario, "design": self.spec.design, "n": self.spec.n,
            "N_target": self.spec.N_target, "seed": self.spec.seed, "mode": self.mode,
            "reps": self.reps,
            "truth_target": {"value": self.truth_target.value,
                             "beta": [float(b) for b in self.truth_target.rule.beta]},
            "truth_pseudo": dict(self.truth_pseudo),
            "methods": {m: s.to_dict() for m, s in self.methods.items()},
        }

    def table_rows(self):
        """Rows (method, statistic, value) in the layout of a results table."""
        rows = []
        for m, s in self.methods.items():
            for stat in ("value", "sd", "se", "cp_pseudo", "cp_target", "target_value", "pcd"):
                rows.append((m, stat, getattr(s, stat)))
        return rows


def _summarize(method, recs, reps):
    ok = [r for r in recs if r.get("error") is None]
    s = MethodSummary(method, included=len(ok), excluded=reps - len(ok))
    for r in recs:
        if r.get("error") is not None:
            s.errors[r["error"]] = s.errors.get(r["error"], 0) + 1
    if not ok:
        return s

    def mean(key):
        vals = [r[key] for r in ok if r.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    def sd(key):
        vals = [r[key] for r in ok if r.get(key) is not None]
        return float(np.std(vals, ddof=1)) if len(vals) >= 2 else None

    s.value, s.sd = mean("value"), sd("value")
    s.fixed_value, s.fixed_sd, s.fixed_se = mean("fixed_value"), sd("fixed_value"), mean("fixed_se")
    s.se = mean("se")
    for key, attr in (("cover_pseudo", "cp_pseudo"), ("cover_target", "cp_target")):
        m = mean(key)
        setattr(s, attr, None if m is None else 100.0 * m)
    s.target_value = mean("target_value")
    s.pcd = mean("pcd")
    return s


def run_replications(spec, methods=("eb", "orig"), reps=200, mode="I", ga=None,
                     truth_target=None, truth_pseudo=None, target_pool=None,
                     fixed_rule=None, progress: Optional[Callable] = None):
    """Replication study: for each draw learn a rule per method and score it.

    Parameters
    ----------
    spec : ScenarioSpec
        ``spec.seed`` is the master seed; replication r uses the stream
        derived from (seed, r).
    methods : iterable of {"eb", "el", "ls", "orig", "qlearn"}
    reps : int
    mode : {"I", "II"}
    ga : GaConfig, optional
        Budget of the rule search (its seed is replaced per replication).
    truth_target : Truth, optional
        Target optimum; computed by grid search on the target pool if absent.
    truth_pseudo : dict, optional
        Method -> pseudo-population optimal value used for CP+; methods
        without an entry report CP+ as absent.
    target_pool : ndarray, optional
        Target covariates used for true values and PCD.
    fixed_rule : LinearRule, optional
        If given, each method also estimates the value of this rule, reported
        as ``fixed_value`` / ``fixed_sd`` / ``fixed_se``.

    Returns
    -------
    ReplicationReport
    """
    methods = tuple(m.lower() for m in methods)
    bad = set(methods) - set(METHODS)
    if bad:
        raise ValidationError(f"unknown methods {sorted(bad)}")
    if reps < 1:
        raise ValidationError("reps must be at least 1")
    start = time.perf_counter()
    master = np.random.SeedSequence(spec.seed)
    pool_seq, rep_seq = master.spawn(2)
    if target_pool is None:
        target_pool = target_covariates(spec.scenario, spec.N_target, np.random.default_rng(pool_seq))
    if truth_target is None:
        truth_target = optimal_rule(target_pool)
    truth_pseudo = dict(truth_pseudo or {})
    ga = ga or GaConfig()
    constraints = spec.constraints
    rep_seeds = rep_seq.spawn(reps)
    records = {m: [] for m in methods}

    for r, ss in enumerate(rep_seeds):
        data_seq, nuis_seq, ga_seq = ss.spawn(3)
        rng = np.random.default_rng(data_seq)
        sample = gen_source(spec.scenario, spec.design, spec.n, rng)
        try:
            fit = fit_nuisance(sample, mode, seed=int(nuis_seq.generate_state(1)[0]))
            po = PseudoOutcomes.from_fit(sample, fit)
            shared_error = None
        except CalitrError as exc:
            shared_error = exc.code
        G = build_constraint_matrix(sample, constraints)
        for m in methods:
            rec = {"rep": r, "method": m, "error": None}
            try:
                if m == "qlearn":
                    rule = q_learning_rule(sample)
                    rec.update(value=None, se=None, cover_pseudo=None, cover_target=None)
                else:
                    if shared_error is not None:
                        raise _Recorded(shared_error)
                    sol = None
                    if m != "orig":
                        gamma = METHOD_GAMMA[m]
                        sol = calibrate(G, CalibrationConfig(
                            gamma=gamma, stabilization=resolve_stabilization(gamma)))
                    W = None if sol is None else sol.W
                    seed = int(ga_seq.generate_state(1)[0])
                    cfg = GaConfig(ga.population_size, ga.generations, ga.crossover_rate,
                                   ga.mutation_scale, ga.elitism_count, seed, ga.restarts,
                                   ga.tournament_size)
                    rule = ga_optimize(lambda B: po.values(B, W), sample.p, cfg,
                                       vectorized=True).rule
                    if fit.is_parametric:
                        est = variance_parametric(sample, rule, fit, sol)
                    else:
                        est = variance_nonparametric(sample, rule, po, sol)
                    if fixed_rule is not None:
                        fx = (variance_parametric(sample, fixed_rule, fit, sol) if fit.is_parametric
                              else variance_nonparametric(sample, fixed_rule, po, sol))
                        rec.update(fixed_value=fx.value, fixed_se=fx.se)
                    half = 1.959963984540054 * est.se
                    tp = truth_pseudo.get(m)
                    rec.update(value=est.value, se=est.se,
                               cover_target=float(abs(est.value - truth_target.value) <= half),
                               cover_pseudo=None if tp is None else float(abs(est.value - tp) <= half))
                rec["target_value"] = true_value_mc(rule, target_pool)
                rec["pcd"] = pcd(rule, truth_target.rule, target_pool)
                rec["beta"] = [float(b) for b in rule.beta]
            except _Recorded as exc:
                rec["error"] = exc.code
            except CalitrError as exc:
                rec["error"] = exc.code
                logger.info("replication %d method %s failed: %s", r, m, exc)
            records[m].append(rec)
        if progress is not None:
            progress(r + 1, reps)

    summaries = {m: _summarize(m, records[m], reps) for m in methods}
    flat = [rec for m in methods for rec in records[m]]
    return ReplicationReport(spec, str(mode), reps, summaries, truth_target,
                             {m: truth_pseudo.get(m) for m in methods}, flat,
                             time.perf_counter() - start)


class _Recorded(Exception):
    def __init__(self, code):
        super().__init__(code)
        self.code = code
