"""Exception types shared across the package."""


class BSSCalError(Exception):
    """Base class for package errors."""


class ValidationError(BSSCalError, ValueError):
    """Input data or configuration failed validation.

    ``problems`` holds the individual row/column-addressed messages when the
    error summarizes a validation report.
    """

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])


class ConfigError(ValidationError):
    """A configuration value is unusable (e.g. an undefined prior mean)."""


class NumericalError(BSSCalError, ArithmeticError):
    """A factorization or decomposition failed."""
