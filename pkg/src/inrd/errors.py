"""Exception types shared across the toolkit."""


class InrdError(Exception):
    """Base class for toolkit errors."""


class ShapeError(InrdError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(InrdError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(InrdError, ArithmeticError):
    """A non-finite value appeared during computation.

    ``layer`` and ``iteration`` are filled in when known.
    """

    def __init__(self, message, *, layer=None, iteration=None):
        super().__init__(message)
        self.layer = layer
        self.iteration = iteration


class ConvergenceError(InrdError, RuntimeError):
    """An iterative method hit its iteration cap; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last
