"""Exception hierarchy shared by every subpackage."""


class MTError(Exception):
    """Base class for all library errors."""


class DimensionError(MTError, ValueError):
    """A tensor axis has the wrong size."""


class GeometryError(MTError, ValueError):
    """Spatial geometry is not integral, or an object leaves the canvas."""


class BatchSizeError(MTError, ValueError):
    pass


class ContractError(MTError, ValueError):
    """A precondition of an operation was violated."""


class GraphError(MTError, RuntimeError):
    """Misuse of the differentiation graph (double backward, stale grads)."""


class DataError(MTError):
    """Base class for file-format problems."""


class BadMagicError(DataError):
    pass


class VersionError(DataError):
    pass


class ChecksumError(DataError):
    pass


class TruncatedError(DataError):
    pass


class NumericError(MTError, FloatingPointError):
    """Training produced a non-finite loss."""
