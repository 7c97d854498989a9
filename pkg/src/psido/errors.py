"""Exception types shared across the package."""


class PsidoError(Exception):
    """Base class for errors raised by this package."""


class InvalidArgument(PsidoError, ValueError):
    """A caller supplied inconsistent or out-of-range input."""


class NumericalFailure(PsidoError, ArithmeticError):
    """An iteration produced a non-finite value.

    ``index`` records the iteration or block at which it was detected.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class StorageError(PsidoError, OSError):
    """A file could not be read or written, or its content is malformed."""

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = None if path is None else str(path)
