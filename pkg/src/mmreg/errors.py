"""Exception types shared across the package."""


class MmregError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(MmregError, ValueError):
    """An argument violates an operation's contract."""


class DataError(MmregError):
    """Input data is missing, malformed, or inconsistent."""


class DecodeError(DataError):
    """A file could not be decoded: bad magic, truncation, wrong format."""


class NanLossError(MmregError, ArithmeticError):
    """A loss value became non-finite during optimisation."""
