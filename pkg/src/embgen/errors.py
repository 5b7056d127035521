"""Exception types shared across the toolkit."""


class EmbgenError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(EmbgenError, ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(EmbgenError, ValueError):
    """A file could not be parsed; message carries the line/byte position."""


class NumericalError(EmbgenError, RuntimeError):
    """A computation produced a non-finite value; message identifies the term."""


class StateError(EmbgenError, RuntimeError):
    """An operation was invoked on an object in the wrong state."""
