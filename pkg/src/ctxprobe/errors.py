"""Exception hierarchy shared by all ctxprobe modules.

The CLI maps these onto its exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericError -> 4. Contract violations inside library
calls (bad arguments, out-of-range indices) raise ArgumentError, which the
CLI treats as a config error.
"""


class CtxprobeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(CtxprobeError):
    """Invalid configuration: bad flags, missing paths, inconsistent setup."""

    exit_code = 2


class ArgumentError(ConfigError):
    """A function was called with arguments violating its preconditions."""


class DataError(CtxprobeError):
    """Input data does not satisfy the documented file contract."""

    exit_code = 3


class ParseError(DataError):
    """Malformed text input; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(DataError):
    """Structurally parseable input that violates an invariant (e.g. duplicate ids)."""


class FormatError(DataError):
    """Binary container with a bad magic or truncated framing."""


class SchemaError(DataError):
    """Container is missing a required tensor or header field."""


class ShapeError(DataError):
    """A tensor's shape differs from the one implied by the config."""


class NumericError(CtxprobeError):
    """Non-finite values or a singular system where a solution was required."""

    exit_code = 4
