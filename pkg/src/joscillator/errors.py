"""Exception hierarchy. The CLI maps these onto exit codes."""


class JOscError(Exception):
    """Base class for all package errors."""


class ConfigurationError(JOscError, ValueError):
    """Invalid parameters or configuration (CLI exit code 2)."""


class InvalidParamsError(ConfigurationError):
    """Physical parameters that cannot describe a valid state or geometry."""


class ProjectorError(JOscError):
    """Eigenvalue clustering failed while building manifold projectors."""


class StateCorruptionError(JOscError):
    """Density matrix lost Hermiticity beyond tolerance."""


class NumericError(JOscError):
    """Non-finite values encountered during propagation."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class InstabilityError(JOscError):
    """Sensed field exceeded the blow-up ceiling (CLI exit code 3)."""

    def __init__(self, message, sample=None, partial=None):
        super().__init__(message)
        self.sample = sample
        self.partial = partial


class ConvergenceError(JOscError):
    """A driven run did not reach a dynamic steady state."""


class FitError(JOscError):
    """Peak fit failed or no peak above the noise floor."""


class NoOscillationError(JOscError):
    """Zero intrinsic gain: no finite external gain can start oscillation."""
