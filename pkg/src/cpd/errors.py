"""Exception hierarchy shared across the package.

Every error raised by this library derives from :class:`CpdError`, so callers
can catch one type at the boundary. The CLI maps subfamilies to exit codes.
"""


class CpdError(Exception):
    """Base class for all library errors."""


class InvalidConfigError(CpdError, ValueError):
    """A configuration value violates its documented constraints."""


class ShapeError(CpdError, ValueError):
    """An array argument has the wrong dimensions."""


class DegenerateVectorError(CpdError, ValueError):
    """A vector with (near-)zero norm reached a normalization step."""


class ContractViolationError(CpdError, RuntimeError):
    """An argument breaks a call contract (bad index, stale cache, ...)."""


class NumericFaultError(CpdError, ArithmeticError):
    """A non-finite value appeared where the math requires finite numbers."""


class DatasetParseError(CpdError, ValueError):
    """A dataset file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DatasetSchemaError(CpdError, ValueError):
    """A dataset file parsed but its records are mutually inconsistent."""


class CheckpointFormatError(CpdError, ValueError):
    """A checkpoint file has a bad magic number, version, or layout."""
