class MuonOGDError(Exception):
    """Base class for library errors."""


class DimensionError(MuonOGDError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(MuonOGDError, ValueError):
    """Input is outside the domain where the operation is defined."""


class NumericalError(MuonOGDError, ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""

    def __init__(self, message: str, *, iterations: int | None = None, best_residual: float | None = None):
        super().__init__(message)
        self.iterations = iterations
        self.best_residual = best_residual


class StateError(MuonOGDError, RuntimeError):
    """An object is not in the state the operation requires."""
