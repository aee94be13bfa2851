"""Exception types shared across the package."""


class CtmcFitError(Exception):
    """Base class for package-specific errors."""


class NonFiniteRateError(CtmcFitError):
    """A transition rate evaluated to NaN, infinity, or a negative value."""


class ZeroTotalRateError(CtmcFitError):
    """No outgoing rate mass from the current state."""


class DimensionMismatchError(CtmcFitError):
    """Covariate or weight dimensions do not line up."""


class UnknownArmError(CtmcFitError, KeyError):
    """A transition arm is not part of the topology or kernel spec."""


class OverflowingRateError(CtmcFitError):
    """exp(log rate) is not finite; the weights are diverging."""


class TopologyViolationError(CtmcFitError):
    """A trajectory uses a transition absent from the topology."""


class NonFiniteLossError(CtmcFitError):
    """The loss is not finite at the requested point."""


class ArmMismatchError(CtmcFitError):
    """Two rate functions do not cover a common arm set."""


class NeedsSliceSpecError(CtmcFitError):
    """Curve export over a multi-dimensional covariate needs a slice."""
