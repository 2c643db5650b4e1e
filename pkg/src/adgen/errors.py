"""Exception types shared across the package.

Each maps onto one of the CLI exit codes: configuration/input problems exit
with 2, everything else with 1.
"""


class AdgenError(Exception):
    """Base class for all package errors."""


class ConfigError(AdgenError, ValueError):
    """Invalid configuration value or combination."""


class LayoutError(AdgenError, FileNotFoundError):
    """A dataset directory does not follow the expected layout."""


class DataError(AdgenError, ValueError):
    """Data is insufficient or inconsistent for the requested operation."""


class ShapeError(AdgenError, ValueError):
    """Tensor or image shapes are incompatible."""


class EvaluationError(AdgenError, ValueError):
    """Metric inputs are degenerate (e.g. only one class present)."""


class TrainingError(AdgenError, RuntimeError):
    """Training diverged or hit a non-recoverable numeric problem."""


INPUT_ERRORS = (ConfigError, LayoutError, DataError, ShapeError, EvaluationError)
