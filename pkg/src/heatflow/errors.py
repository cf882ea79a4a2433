"""Exception types shared across the package."""


class HeatflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HeatflowError):
    """Invalid build/scenario configuration (bad refinement, bad config key, ...)."""


class UsageError(HeatflowError):
    """Operation called with inputs violating its contract."""


class InputError(HeatflowError):
    """External data (closed-form samples, files) failed validation."""


class MedialAxisError(HeatflowError):
    """Nearest-point projection requested at or beyond the medial axis."""


class SolverFailure(HeatflowError):
    """A linear solve did not reach the required residual."""


class StepSizeError(HeatflowError):
    """Flow step left the projection reach; retry with a smaller timestep."""


class DivergenceError(HeatflowError):
    """A fixed-point iteration diverged."""
