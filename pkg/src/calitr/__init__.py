"""Learn linear treatment rules for a target population known only through covariate summaries."""

__version__ = "0.1.0"

from .calibration import (
    CalibrationConfig,
    CalibrationWeighter,
    FeasibilityReport,
    WeightSolution,
    calibrate,
    check_feasibility,
    compute_weights,
    rho,
    rho_prime,
    solve_lambda,
    stabilize_weights,
)
from .core import (
    ConstraintMatrix,
    ConstraintSpec,
    LinearRule,
    Moment,
    SourceSample,
    TargetSample,
    build_constraint_matrix,
    read_csv,
    validate_dataset,
    write_csv,
)
from .exceptions import CalitrError, NumericalError, ValidationError
from .nuisance import (
    NuisanceFit,
    fit_forest_outcome,
    fit_kernel_propensity,
    fit_linear_outcome,
    fit_logistic,
    fit_nuisance,
)
from .policy import (
    CalibratedPolicyLearner,
    GaConfig,
    QLearningRule,
    ga_optimize,
    grid_search_sphere,
    pcd,
    q_learning_rule,
)
from .value import (
    ValueEstimate,
    aipw_value,
    estimate_value,
    evaluate_on_target,
    psi,
    variance_nonparametric,
    variance_parametric,
)

__all__ = [
    "CalibratedPolicyLearner", "CalibrationConfig", "CalibrationWeighter", "CalitrError",
    "ConstraintMatrix", "ConstraintSpec", "FeasibilityReport", "GaConfig", "LinearRule",
    "Moment", "NuisanceFit", "NumericalError", "QLearningRule", "SourceSample",
    "TargetSample", "ValidationError", "ValueEstimate", "WeightSolution", "aipw_value",
    "build_constraint_matrix", "calibrate", "check_feasibility", "compute_weights",
    "estimate_value", "evaluate_on_target", "fit_forest_outcome", "fit_kernel_propensity",
    "fit_linear_outcome", "fit_logistic", "fit_nuisance", "ga_optimize",
    "grid_search_sphere", "pcd", "psi", "q_learning_rule", "read_csv", "rho", "rho_prime",
    "solve_lambda", "stabilize_weights", "validate_dataset", "variance_nonparametric",
    "variance_parametric", "write_csv",
]
