"""Exception hierarchy shared by every module."""


class AtmosConvError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AtmosConvError, ValueError):
    """Operand extents are incompatible."""


class ConfigError(AtmosConvError, ValueError):
    """An argument or configuration value is invalid."""


class ContractError(AtmosConvError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(AtmosConvError, ArithmeticError):
    """NaN/Inf encountered where finite values are required."""


class DegenerateError(AtmosConvError, ValueError):
    """The input has no well-defined result (e.g. an all-zero kernel)."""


class StateError(AtmosConvError, RuntimeError):
    """An object was used in a state that does not allow the operation."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""
