"""Exception types shared across the package."""


class FaceParseError(Exception):
    """Base class for all package errors."""


class ShapeError(FaceParseError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ConfigError(FaceParseError, ValueError):
    """A configuration value violates its invariants."""


class DataError(FaceParseError, ValueError):
    """Input data (manifest, mask, raster) is malformed."""


class GraphStateError(FaceParseError, RuntimeError):
    """The autodiff graph is in a state that forbids the request."""


class NonFiniteError(FaceParseError, ArithmeticError):
    """A NaN or Inf value was produced by an operation."""
