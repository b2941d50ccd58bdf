"""Exception hierarchy shared by every glf module."""


class GLFError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(GLFError, ValueError):
    """Shapes, sizes or settings that cannot work together."""


class DomainError(GLFError, ValueError):
    """An operation was evaluated outside its mathematical domain."""


class UsageError(GLFError, RuntimeError):
    """An API was called in an invalid state or with invalid arguments."""


class NumericError(GLFError, ArithmeticError):
    """A computation produced non-finite values.

    Attributes:
        batch_indices: rows (axis 0) holding non-finite values, when known.
    """

    def __init__(self, message, batch_indices=None):
        super().__init__(message)
        self.batch_indices = batch_indices


class SingularityError(NumericError):
    """A mixing matrix became (numerically) singular."""


class FormatError(GLFError, ValueError):
    """A binary file could not be parsed.

    Attributes:
        offset: byte offset at which parsing failed, or None.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
