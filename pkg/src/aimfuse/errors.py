"""Exception hierarchy shared by every aimfuse module."""


class AimFuseError(Exception):
    """Base class for all library errors."""


class ShapeError(AimFuseError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(AimFuseError, ValueError):
    """An argument lies outside the operation's domain."""


class ConfigError(AimFuseError, ValueError):
    """A configuration value or file is invalid."""


class ParseError(AimFuseError, ValueError):
    """A data file does not follow its declared format."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class LeakageError(AimFuseError):
    """A split plan lets held-out drugs or pairs reach training."""


class NumericError(AimFuseError, ArithmeticError):
    """A forward pass produced a non-finite value."""
