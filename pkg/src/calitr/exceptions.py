"""Exception hierarchy.

Every error carries a machine-readable ``code`` and the CLI exit status it maps
to: 1 for bad input data or specifications, 2 for numerical failures.
"""


class CalitrError(Exception):
    """Base class for all errors raised by calitr."""

    code = "error"
    exit_code = 1

    def to_dict(self):
        return {"code": self.code, "message": str(self)}


class ValidationError(CalitrError, ValueError):
    code = "input.invalid"
    exit_code = 1


class MissingColumns(ValidationError):
    code = "input.missing_columns"


class MissingFile(ValidationError):
    code = "input.missing_file"


class NonBinaryTreatment(ValidationError):
    code = "input.non_binary_treatment"


class NonFinite(ValidationError):
    code = "input.non_finite"


class SingleArm(ValidationError):
    code = "input.single_arm"


class TooFewRows(ValidationError):
    code = "input.too_few_rows"


class IndexOutOfRange(ValidationError):
    code = "constraints.index_out_of_range"


class UnsupportedMoment(ValidationError):
    code = "constraints.unsupported_moment"


class DimensionMismatch(ValidationError):
    code = "input.dimension_mismatch"


class LengthMismatch(ValidationError):
    code = "input.length_mismatch"


class SchemaMismatch(ValidationError):
    code = "report.schema_mismatch"


class DimensionTooLarge(ValidationError):
    code = "policy.dimension_too_large"


class UnsupportedScenario(ValidationError):
    code = "simulate.unsupported_scenario"


class TooFewObservations(ValidationError):
    code = "nuisance.too_few_observations"


class NonPositiveWeight(ValidationError):
    code = "calibration.non_positive_weight"


class NumericalError(CalitrError, ArithmeticError):
    code = "numerical.failure"
    exit_code = 2


class NotConverged(NumericalError):
    code = "calibration.not_converged"


class DomainViolation(NumericalError):
    code = "calibration.domain_violation"


class Infeasible(NumericalError):
    """Calibration targets lie outside the interior of the convex hull."""

    code = "calibration.infeasible"

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report

    def to_dict(self):
        out = super().to_dict()
        if self.report is not None:
            out["margin"] = self.report.margin
            if self.report.direction is not None:
                out["direction"] = [float(v) for v in self.report.direction]
        return out


class SingularG(NumericalError):
    code = "value.singular_matrix"

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number

    def to_dict(self):
        out = super().to_dict()
        out["condition_number"] = self.condition_number
        return out


class RankDeficient(NumericalError):
    code = "nuisance.rank_deficient"


class Separation(NumericalError):
    code = "nuisance.separation"


class SeparationWarning(UserWarning):
    """Logistic fit hit (quasi-)complete separation and fell back to ridge."""
