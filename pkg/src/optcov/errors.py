"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: validation problems exit with 1, solver
failures with 2 and failed verification suites with 3.
"""


class OptcovError(Exception):
    """Base class for library errors."""


class ValidationError(OptcovError, ValueError):
    """Inputs violate a documented precondition."""


class DomainError(ValidationError):
    """A scalar argument lies outside the domain of a formula."""


class RangeError(ValidationError):
    """A requested value lies outside the range covered by a schedule."""


class DimensionError(ValidationError):
    """Array shapes do not match the operator or model they are used with."""


class CapabilityError(OptcovError):
    """An object lacks a capability required by the caller."""


class SingularityError(OptcovError, ArithmeticError):
    """The requested quantity is undefined (division by zero variance, ...)."""


class SolverError(OptcovError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class VerificationError(OptcovError):
    """A verification suite reported at least one failing check."""
