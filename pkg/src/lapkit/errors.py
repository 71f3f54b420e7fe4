"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration problems exit 1,
numerical/domain failures exit 2, and I/O failures exit 3.
"""


class LapkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LapkitError):
    """Invalid configuration file, enum value, or missing referenced file."""


class DimensionError(LapkitError, ValueError):
    """Shape or length mismatch between tensors, trees, or operators."""


class DomainError(LapkitError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ResourceError(LapkitError):
    """Operation refused because it would exceed a configured resource cap."""


class NumericalError(LapkitError, ArithmeticError):
    """A numerical routine failed (e.g. Cholesky after maximal jitter)."""


class CalibrationError(LapkitError):
    """Calibration could not produce any finite objective value."""
