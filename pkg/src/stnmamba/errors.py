"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A tensor has the wrong size along a named axis."""

    def __init__(self, axis, message):
        self.axis = axis
        super().__init__("%s: %s" % (axis, message))


class ConfigError(ValueError):
    """Model, memory, or run configuration is invalid."""


class DataError(ValueError):
    """Dataset layout, frame files, or label files are invalid."""


class ModeError(RuntimeError):
    """An operation was called in the wrong train/eval mode."""


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""
