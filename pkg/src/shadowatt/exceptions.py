"""Exception types raised across the package.

Every error carries enough structure (row, column, residual, ...) for a
caller to report the failure without re-parsing the message.
"""


class ShadowAttError(Exception):
    """Base class for all package errors."""


# ---------------------------------------------------------------- data


class MissingColumn(ShadowAttError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"column {name!r} not found in header")


class NonBinaryValue(ShadowAttError):
    def __init__(self, row, column, value):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"row {row}, column {column!r}: value {value!r} is not in {{0,1}}")


class ParseError(ShadowAttError):
    def __init__(self, row, column, value):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r}")


# ------------------------------------------------------------- numerics


class DimensionMismatch(ShadowAttError):
    pass


class NumericalBlowup(ShadowAttError):
    """Propensity saturated (some pi above 1 - 1e-10); ratios are unusable."""

    def __init__(self, max_pi):
        self.max_pi = max_pi
        super().__init__(f"propensity saturated: max pi = {max_pi!r}")


# ------------------------------------------------------------- nuisance


class DegenerateDesign(ShadowAttError):
    pass


class EmptyTrainingSet(ShadowAttError):
    pass


# ----------------------------------------------------------- estimators


class NonConvergence(ShadowAttError):
    def __init__(self, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"solver did not converge: residual {residual:.3e} after {iterations} iterations"
        )


class SingularJacobian(ShadowAttError):
    pass


class SingularM(ShadowAttError):
    pass


class DegenerateDenominator(ShadowAttError):
    def __init__(self, value):
        self.value = value
        super().__init__(f"estimating-equation denominator {value!r} is numerically zero")


class NoTreatedUnits(ShadowAttError):
    pass


class MissingH(ShadowAttError):
    pass


# ------------------------------------------------------------ crossfit


class InfeasibleStratification(ShadowAttError):
    def __init__(self, arm, count, folds):
        self.arm = arm
        self.count = count
        self.folds = folds
        super().__init__(f"arm t={arm} has {count} rows, fewer than {folds} folds")


# ------------------------------------------------------------ inference


class PipelineFailure(ShadowAttError):
    pass


# ------------------------------------------------------------------ cli


class ConfigError(ShadowAttError):
    pass
