"""Exception types shared across the package."""


class StreamFnError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(StreamFnError):
    """A file does not conform to its declared on-disk format."""


class DataError(StreamFnError):
    """Input data is structurally valid but unusable (NaN/Inf, all voxels degenerate, ...)."""


class UsageError(StreamFnError):
    """The caller violated a precondition (bad argument, empty batch, unknown name)."""


class ShapeError(UsageError):
    """Grid or array dimensions do not meet an operator's requirements."""


class OutOfDomainError(StreamFnError):
    """A query coordinate lies outside the normalized [-1, 1]^3 domain."""
