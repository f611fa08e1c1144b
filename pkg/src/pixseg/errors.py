class InvalidParameterError(ValueError):
    """An argument violates a documented precondition."""


class EmptyDensityError(RuntimeError):
    """Every candidate ended up with zero sampling weight."""


class NumericalFailureError(FloatingPointError):
    """Non-finite values appeared during a forward pass."""


class ContractViolationError(RuntimeError):
    """An operation was called without its required prior state."""


class ParseError(ValueError):
    """A metrics or config file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
