"""Exception types shared across the package."""


class PreviewflowError(Exception):
    """Base class for all previewflow errors."""


class GridError(PreviewflowError):
    """Invalid grid contents (non-finite values, time outside [0, 1], ...)."""


class DimensionError(PreviewflowError):
    """Invalid or mismatched grid dimensions."""


class DivisibilityError(DimensionError):
    """A scale factor does not divide the grid dimensions."""


class ScheduleError(PreviewflowError):
    """A timestep schedule violates its ordering or endpoint constraints."""


class ContractError(PreviewflowError):
    """An operation was called outside its contract (shape, arity, kind)."""


class TrainingError(PreviewflowError):
    """Training diverged.  ``step`` is the offending step, ``trace`` the
    per-step losses collected up to that point."""

    def __init__(self, message, step=None, trace=()):
        super().__init__(message)
        self.step = step
        self.trace = tuple(trace)


class IntegrationError(PreviewflowError):
    """The ODE state became non-finite at step ``step``."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegenerateDataError(PreviewflowError):
    """Statistical input carries no usable signal (e.g. all-zero differences)."""


class SchemaError(PreviewflowError):
    """A configuration document failed schema validation."""


class UnpairedRunError(PreviewflowError):
    """A comparison was requested between runs that do not pair up."""
