"""Exception hierarchy shared by every module in the package."""


class IDMError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(IDMError, ValueError):
    pass


class NumericFailureError(IDMError, FloatingPointError):
    """A non-finite value appeared during a computation.

    ``last_theta`` carries the last finite iterate when the failure happened
    inside an optimizer, otherwise it is ``None``.
    """

    def __init__(self, message, last_theta=None):
        super().__init__(message)
        self.last_theta = last_theta


class CapabilityError(IDMError):
    """Requested size exceeds a configured cap (e.g. parameter count)."""


class WrongFamilyError(IDMError, TypeError):
    pass


class DegenerateFitError(IDMError):
    pass


class SingularFisherError(IDMError, ArithmeticError):
    def __init__(self, message, min_eigenvalue=float("nan")):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class FitFailureError(IDMError):
    """An optimizer failed; carries the context it failed in."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = dict(context or {})


class ReplicateFailureError(IDMError):
    """Too many resampling replicates failed."""

    def __init__(self, message, failures=0, total=0):
        super().__init__(message)
        self.failures = failures
        self.total = total
