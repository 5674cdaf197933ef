"""Exception hierarchy shared by every module."""


class FastNMTError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FastNMTError, ValueError):
    """Operand dimensions do not agree."""


class InputError(FastNMTError, ValueError):
    """Caller supplied an invalid token id, sentence or argument."""


class FormatError(FastNMTError):
    """A model, lexical table or spec file could not be parsed."""


class ModelValidationError(FastNMTError):
    """Model tensors are present but mutually inconsistent.

    Attributes:
        tensor: name of the offending tensor, when one can be singled out.
    """

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class AccumulatorOverflowError(FastNMTError, ArithmeticError):
    """A 32-bit integer accumulator wrapped during a checked 16-bit GEMM."""
