"""Exception taxonomy shared across the package.

Every recoverable contract violation raises a subclass of UBMFError so
callers can catch the family with one except clause.  ValueError mixins
keep plain-stdlib callers working.
"""


class UBMFError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(UBMFError, ValueError):
    """A parameter is outside its documented domain (sigma < 0, bad dof,
    malformed prior, unknown class id, malformed manifest, ...)."""


class InvalidInputError(UBMFError, ValueError):
    """An input array violates its structural contract (non-simplex
    probability vector, NaN signal, wrong shape)."""


class InvalidPairingError(UBMFError, ValueError):
    """Two signals that must share label / length / sample rate do not."""


class ModelNotReadyError(UBMFError, RuntimeError):
    """A learned component is required but absent or insufficiently trained."""


class MissingClassError(UBMFError, ValueError):
    """A class id required by the operation has no samples."""


class InsufficientBatchError(UBMFError, ValueError):
    """A batch is too small for the requested estimator."""


class InsufficientDataError(UBMFError, ValueError):
    """The dataset cannot support the requested episode or split."""


class SingularCovarianceError(UBMFError, ValueError):
    """A covariance or scale matrix is numerically singular."""


class NumericalFailureError(UBMFError, ArithmeticError):
    """A computation lost all precision (global underflow, non-finite)."""


class TrainingFailureError(UBMFError, RuntimeError):
    """Training diverged; carries the last finite parameter snapshot."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DegenerateInputError(UBMFError, ValueError):
    """An input is degenerate for the operation (zero variance, empty)."""


class UndefinedMetricError(UBMFError, ValueError):
    """A requested metric is undefined for the given data (e.g. AUROC
    with one class present)."""


class FormatError(UBMFError, ValueError):
    """A serialized artifact is corrupt; carries the byte offset at which
    parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
