"""Exception types shared across the package."""


class NsnKvError(Exception):
    """Base class for all package errors."""


class NonPowerOfTwoDim(NsnKvError):
    """Hadamard transform requested for a dimension that is not a power of two."""


class ShapeMismatch(NsnKvError):
    """Operands have inconsistent shapes."""


class IndexOutOfRange(NsnKvError):
    """Codebook index outside [0, 255]."""


class ZeroVector(NsnKvError):
    """A vector with (near-)zero norm reached an angle-based operation."""


class DegenerateProjection(NsnKvError):
    """Parallel-preserving scale adjustment hit a near-orthogonal pair."""


class FormatError(NsnKvError):
    """Malformed binary artifact (bad magic, version, or truncation)."""
