class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class FormatError(ValueError):
    """A binary container is malformed; the message names the byte offset."""
