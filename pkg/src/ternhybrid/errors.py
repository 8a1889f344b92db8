"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TernHybridError(Exception):
    exit_code = 1


class ShapeError(TernHybridError, ValueError):
    exit_code = 2


class ConfigError(TernHybridError, ValueError):
    exit_code = 2


class PolicyError(ConfigError):
    pass


class StateError(TernHybridError, RuntimeError):
    exit_code = 2


class FormatError(TernHybridError, ValueError):
    """Malformed binary input. ``offset`` is the byte position where parsing failed."""

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class NumericError(TernHybridError, ArithmeticError):
    exit_code = 4
