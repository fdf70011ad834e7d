"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class SurvCateError(Exception):
    """Base class for all package errors."""


class ConfigError(SurvCateError, ValueError):
    """Invalid run configuration or hyperparameter."""


class DataError(SurvCateError, ValueError):
    """Input data violates a precondition (schema, ranges, missing values)."""


class NumericalError(SurvCateError, ArithmeticError):
    """An estimator failed numerically (non-convergence, degenerate fit)."""


class ConvergenceError(NumericalError):
    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm
