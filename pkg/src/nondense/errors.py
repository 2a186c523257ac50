"""Exception and warning types shared across the package."""


class NondenseError(Exception):
    """Base class for all numerical and configuration failures."""


class DimensionMismatch(NondenseError, ValueError):
    pass


class SingularResolvent(NondenseError):
    pass


class NegativeTime(NondenseError, ValueError):
    pass


class QuadratureFailure(NondenseError):
    pass


class FitDegenerate(NondenseError):
    pass


class ContractionFailure(NondenseError):
    """The one-step Picard map is not a contraction at the requested step."""

    def __init__(self, message, factor=None):
        super().__init__(message)
        self.factor = factor


class OutOfSpan(NondenseError, ValueError):
    pass


class NotX0Valued(NondenseError, ValueError):
    pass


class ActionUnavailable(NondenseError):
    pass


class SpectralGapMissing(NondenseError):
    pass


class EtaTooLarge(NondenseError, ValueError):
    pass


class TailBudgetExceeded(NondenseError):
    def __init__(self, message, budget=None):
        super().__init__(message)
        self.budget = budget


class NotContracting(NondenseError):
    """Persistence could not be certified because the contraction constant is >= 1."""

    def __init__(self, message, q=None):
        super().__init__(message)
        self.q = q


class NearPole(NondenseError):
    pass


class ConfigError(NondenseError):
    pass


class ScheduleExhausted(UserWarning):
    """Raised as a warning: the lambda schedule ended before rel_tol was met."""
