class CLDError(Exception):
    """Base class for all library errors."""


class InvalidInputError(CLDError, ValueError):
    pass


class InsufficientHistoryError(InvalidInputError):
    pass


class ShapeError(CLDError, ValueError):
    """Raised by a differentiable op when operand shapes do not line up."""


class SchemaError(InvalidInputError):
    """A file on disk does not carry the expected schema tag or fields."""
