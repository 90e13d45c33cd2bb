"""Exception types raised across the package."""


class PriorNetError(Exception):
    """Base class for all package errors."""


class ShapeError(PriorNetError, ValueError):
    pass


class InvalidRangeError(PriorNetError, ValueError):
    pass


class DegenerateInputError(PriorNetError, ValueError):
    pass


class InvalidLabelMapError(PriorNetError, ValueError):
    pass


class InvalidTargetError(PriorNetError, ValueError):
    pass


class ConfigError(PriorNetError, ValueError):
    pass


class DataError(PriorNetError, ValueError):
    pass


class FormatError(PriorNetError, ValueError):
    pass


class UnsupportedError(FormatError):
    pass


class GenerationError(PriorNetError, RuntimeError):
    pass


class NumericError(PriorNetError, ArithmeticError):
    pass


class CompatibilityError(PriorNetError, ValueError):
    pass
