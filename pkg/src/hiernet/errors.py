"""Exception hierarchy for hiernet."""


class HiernetError(Exception):
    """Base class for all package errors."""


class ShapeError(HiernetError, ValueError):
    """Input dimensions do not conform to an architecture."""


class DomainError(HiernetError, ValueError):
    """Argument outside the domain an operation is defined on."""


class CompositionError(HiernetError, ValueError):
    """Two networks cannot be combined (depth or input width differ)."""


class PartitionError(HiernetError, ValueError):
    """Final-layer split requested with a group size that does not divide the width."""


class DegenerateInputError(HiernetError, ValueError):
    """A vector that must be nonzero has zero (weighted) norm."""


class DegenerateSearchError(DegenerateInputError):
    """Every extension candidate realizes identically zero on the samples."""


class SingularSystemError(HiernetError, ArithmeticError):
    """The 2x2 normal equations of the joint step are numerically singular."""


class InstabilityError(HiernetError, ArithmeticError):
    """Part responses cancel completely, the stability constant is infinite."""


class AlreadyOptimalError(HiernetError, ZeroDivisionError):
    """Loss is exactly zero on the data, optimality indicator undefined."""


class NumericDivergence(HiernetError, ArithmeticError):
    """Training produced a non-finite loss.

    ``state`` holds the last weights with a finite loss.
    """

    def __init__(self, message, state=None, loss=None):
        super().__init__(message)
        self.state = state
        self.loss = loss


class ConfigError(HiernetError, ValueError):
    """Invalid experiment or run configuration."""
