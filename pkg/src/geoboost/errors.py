"""Exception hierarchy shared across the package.

CLI exit codes: validation problems exit 2, numeric problems exit 3.
"""


class GeoboostError(Exception):
    """Base class for package errors."""


class ValidationError(GeoboostError, ValueError):
    """Malformed or inconsistent input data (CLI exit 2)."""


class ParseError(ValidationError):
    """Unreadable model or config file; message carries the position."""


class NumericError(GeoboostError, ArithmeticError):
    """Numerically impossible request, e.g. a factorization that cannot
    succeed or a metric that is undefined for the input (CLI exit 3)."""


class UndefinedMetricError(NumericError):
    """Metric has no defined value for the given input (e.g. single-class AUC)."""
