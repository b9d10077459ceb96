"""Exception hierarchy shared by all reghmm modules."""


class RegHmmError(Exception):
    """Base class for all errors raised by reghmm."""


class InvalidArgumentError(RegHmmError, ValueError):
    pass


class ValidationError(RegHmmError, ValueError):
    """Raised when parameters violate structural invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "invalid parameters")


class FlatCovariateError(RegHmmError, ArithmeticError):
    """The regression covariate has (numerically) zero variance."""


class ParameterOverflowError(RegHmmError, ArithmeticError):
    pass


class DivergedRegressionError(RegHmmError, ArithmeticError):
    pass


class EmptyDatasetError(RegHmmError, ValueError):
    pass


class ParseError(RegHmmError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(RegHmmError, ValueError):
    """Model file does not match the expected schema version or fields."""

    def __init__(self, message, field=None, version=None):
        self.field = field
        self.version = version
        super().__init__(message)


class InsufficientDataError(RegHmmError, ValueError):
    pass


class UndefinedMetricError(RegHmmError, ValueError):
    pass
