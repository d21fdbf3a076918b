"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class LabelError(ValueError):
    """A class label is out of range or unknown."""


class DataError(ValueError):
    """A dataset is empty or too small for the requested operation."""


class ConditioningError(ValueError):
    """A covariance matrix is singular or otherwise numerically unusable."""


class ConfigError(ValueError):
    """A configuration value fails validation."""


class FormatError(ValueError):
    """An input file does not conform to its declared format."""


class DivergenceError(RuntimeError):
    """Training produced non-finite values; the run cannot continue."""


class OracleError(KeyError):
    """The inspection oracle has no label for the requested sample."""
