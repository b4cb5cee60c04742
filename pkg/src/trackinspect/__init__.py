"""Multi-task railway track inspection: material segmentation and fastener assessment."""

__version__ = "0.1.0"


class ShapeError(ValueError):
    """Array dimensions incompatible with the requested operation."""


class DataError(ValueError):
    """Input data is malformed (non-finite pixels, empty pools, ...)."""


class ConfigError(ValueError):
    """Configuration value out of range or unknown."""


class NumericError(FloatingPointError):
    """A NaN/inf appeared where training or inference requires finite values."""
