"""Exception hierarchy shared across the package."""


class RavenError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RavenError):
    """Tensor shapes or ranks are incompatible with an operation."""


class NonFiniteError(RavenError):
    """A NaN or infinity was observed while debug validation is enabled."""


class ValidationError(RavenError):
    """A config, flag, or input document failed validation."""


class DataError(ValidationError):
    """A dataset or embedding file is malformed.

    Carries the source location so the offending line/field can be fixed.
    """

    def __init__(self, message, *, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.line = line
        self.field = field


class UnsupportedAblationError(ValidationError):
    """An operation was requested on a model variant that cannot provide it."""


class ConvergenceError(RavenError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message, residual=None):
        if residual is not None:
            message = f"{message} (residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual


class CheckpointError(RavenError):
    """A parameter checkpoint is malformed or disagrees with the model."""
