"""Exception hierarchy shared across the package."""


class MapFuseError(Exception):
    """Base class for all package errors."""


class DimensionError(MapFuseError, ValueError):
    """Tensor or raster shapes are incompatible."""


class NumericError(MapFuseError, ArithmeticError):
    """A computation produced NaN or infinite values."""


class LabelError(MapFuseError, ValueError):
    """A label map holds a class id outside the class table."""


class CorruptionError(MapFuseError, IndexError):
    """Pooling indices point outside the target grid."""


class FormatError(MapFuseError, ValueError):
    """A file does not follow the expected binary or JSON layout."""


class UsageError(MapFuseError, RuntimeError):
    """An API was called in an invalid state."""


class SamplingError(MapFuseError, RuntimeError):
    """No patch satisfying the annotation threshold could be drawn."""
