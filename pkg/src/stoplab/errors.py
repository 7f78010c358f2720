"""Exception types shared across the package."""


class StopLabError(Exception):
    """Base class for all errors raised by stoplab."""


class DimensionError(StopLabError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(StopLabError, RuntimeError):
    """An API was called in a state that does not allow it."""


class ConfigError(StopLabError, ValueError):
    """A configuration value or argument is invalid."""


class FormatError(StopLabError, ValueError):
    """A file on disk does not follow its declared binary layout."""


class InternalError(StopLabError, RuntimeError):
    """An invariant that should be unreachable was violated."""


class TrainingDiverged(StopLabError, RuntimeError):
    """The training loss became NaN or infinite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
