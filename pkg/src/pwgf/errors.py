"""Exception hierarchy shared across the package."""


class PwgfError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(PwgfError):
    """Invalid configuration: bad sampler spec, unknown key, constraint violation."""


class NumericalError(PwgfError):
    """Numerical failure: NaN in a matvec, non-finite intermediate, solver blow-up."""


class DegenerateJacobianError(NumericalError):
    """The spatial Jacobian of the push-forward map lost invertibility."""


class FlowAbort(NumericalError):
    """A run aborted mid-flight.

    Carries the partial state so the caller can dump diagnostics:
    ``state`` (last good PwgfState), ``metrics`` (records so far) and
    ``reason`` (short machine-readable tag).
    """

    def __init__(self, message, reason, state=None, metrics=None):
        super().__init__(message)
        self.reason = reason
        self.state = state
        self.metrics = metrics if metrics is not None else []
