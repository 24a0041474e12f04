"""Exception hierarchy shared by every module of the package."""


class DRTError(Exception):
    """Base class for all package errors."""


class DimensionError(DRTError, ValueError):
    """Operand shapes are incompatible with an operation."""


class NumericError(DRTError, ArithmeticError):
    """A computation produced or received a non-finite value."""


class ContractError(DRTError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ConfigError(DRTError, ValueError):
    """Invalid configuration record or config file."""


class DataError(DRTError, IOError):
    """Malformed or unusable dataset / checkpoint file."""


class BadMagicError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class VersionMismatchError(DataError):
    pass


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    ``diagnostics`` holds a JSON-serialisable snapshot of the failing step.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
