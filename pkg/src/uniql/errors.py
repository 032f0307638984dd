"""Exception types shared across the toolkit."""


class UniqlError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(UniqlError, ValueError):
    """Array has the wrong shape, dtype, or contains non-finite values."""


class NumericalDomainError(UniqlError, ValueError):
    """Input violates a numerical precondition (e.g. not PSD within tolerance)."""


class CalibrationError(UniqlError, ValueError):
    """Calibration data is missing or inconsistent."""


class AllocationError(UniqlError, ValueError):
    """Pruning-rate allocation is infeasible."""


class RangeError(UniqlError, ValueError):
    """Integer code out of the representable range."""


class UnsupportedRateError(UniqlError, ValueError):
    """Requested pruning rate is not part of the stored plan."""


class ArtifactError(UniqlError, ValueError):
    """Serialized artifact is malformed or inconsistent with its manifest."""
