"""Exception hierarchy shared across the solvers and the experiment runner."""


class FlowLabError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(FlowLabError, ValueError):
    """A constructed object or configuration violates its declared invariants."""


class ResolutionError(ValidationError):
    """A grid is too coarse to resolve the requested length or time scale."""


class CflError(ValidationError):
    """An explicit time step violates its stability constraint."""


class BandwidthError(ValidationError):
    """An occupation-band width does not resolve the sampling step."""


class SingularityError(FlowLabError):
    """An integrand is non-integrable for the given parameters."""


class WindowError(FlowLabError):
    """A shifted evaluation window leaves the resolved part of the domain."""


class BlowUpError(FlowLabError):
    """A solver produced non-finite values.

    Carries the time index at which the blow-up was detected.
    """

    def __init__(self, message, time_index=None):
        super().__init__(message)
        self.time_index = time_index


class DivergenceError(FlowLabError):
    """A fixed-point iteration failed to converge; carries the last residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InstabilityError(FlowLabError):
    """A scheme produced values outside its tolerated range (e.g. negative mass)."""
