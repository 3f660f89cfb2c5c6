"""Exception types raised across the package."""


class FocalsConvError(Exception):
    pass


class BoundsError(FocalsConvError, IndexError):
    pass


class ShapeError(FocalsConvError, ValueError):
    pass


class CapacityError(FocalsConvError, MemoryError):
    pass


class ModeError(FocalsConvError, ValueError):
    pass


class CanonicalFormError(FocalsConvError, ValueError):
    pass


class AlignmentError(FocalsConvError, ValueError):
    pass


class ConfigError(FocalsConvError, ValueError):
    pass


class StateError(FocalsConvError, RuntimeError):
    pass


class FormatError(FocalsConvError, ValueError):
    pass


class NumericalError(FocalsConvError, ArithmeticError):
    pass
