"""Exception types raised across the package."""


class GCPError(Exception):
    """Base class for package errors."""


class IndexRangeError(GCPError, IndexError):
    """A coordinate or linear index lies outside the tensor shape."""


class SizeGuardError(GCPError, MemoryError):
    """An operation would materialize a tensor above the dense size guard."""


class DomainError(GCPError, ValueError):
    """Data values lie outside the domain of the selected loss."""


class InfeasibleSampleError(GCPError, ValueError):
    """A sampler was asked for more draws than the stratum can supply."""


class ShapeMismatchError(GCPError, ValueError):
    """Operands disagree on tensor shape or model rank."""


class FitError(GCPError, RuntimeError):
    """The optimizer hit a non-recoverable state (e.g. non-finite loss)."""
