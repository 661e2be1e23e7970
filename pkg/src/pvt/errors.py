"""Exception hierarchy shared across the package.

Every error raised on purpose derives from PvtError so callers (and the
CLI exit-code mapping) can distinguish our failures from genuine bugs.
"""


class PvtError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PvtError):
    """Operand dimensions are incompatible with the requested operation."""


class NumericError(PvtError):
    """Input contains NaN/inf or an operation would be numerically undefined."""


class ConfigError(PvtError):
    """A configuration value is invalid or two values are inconsistent."""


class ParseError(PvtError):
    """A file could not be parsed. Carries the offending line when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyInputError(PvtError):
    """An operation that needs at least one point/voxel received none."""


class CapacityError(PvtError):
    """An input exceeds a hard size cap for the requested code path."""


class ResourceError(PvtError):
    """A debugging/oracle path would allocate beyond its safety limit."""
