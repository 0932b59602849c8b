"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class ParseError(ValueError):
    """An input file violates the expected line format."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""
