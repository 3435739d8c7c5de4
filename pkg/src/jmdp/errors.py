"""Exception types shared across the package."""


class JmdpError(Exception):
    """Base class for all package errors."""


class InvalidInputError(JmdpError, ValueError):
    """Malformed numerical input (non-finite entries, shape mismatch, ...)."""


class InvalidQueryError(JmdpError, ValueError):
    """Structurally invalid query (duplicate actions, bad index, ...)."""


class ConfigError(JmdpError, ValueError):
    """Invalid configuration or file content; message carries the field path."""


class FeatureRankError(JmdpError, ValueError):
    """Feature matrix is rank deficient."""


class AssumptionError(JmdpError, ValueError):
    """A precondition of the requested analysis does not hold."""


class BudgetError(JmdpError, ValueError):
    """A configured resource budget would be exceeded."""


class DivergenceError(JmdpError, RuntimeError):
    """Iterative scheme detected sustained expansion and aborted."""
