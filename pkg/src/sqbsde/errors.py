"""Exception types shared across the package."""


class SqbsdeError(Exception):
    """Base class for all package errors."""


class InvalidArgument(SqbsdeError, ValueError):
    """An argument violates a documented precondition."""


class NumericDomain(SqbsdeError, ArithmeticError):
    """Evaluation left the numeric domain (log/sqrt of a negative, division
    by zero, non-finite quadrature node). Carries context about where."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class Singularity(SqbsdeError, ArithmeticError):
    """Generator evaluated at y = 0, where it is undefined."""


class BranchError(SqbsdeError, ValueError):
    """Terminal samples are not of a single strict sign."""


class BlowUp(SqbsdeError, RuntimeError):
    """A simulated path exceeded the blow-up guard. Names path and step."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class IllConditioned(SqbsdeError, RuntimeError):
    """Regression design matrix is rank deficient. Names the time node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class Infeasible(SqbsdeError, ValueError):
    """A dual control violates the conjugate feasibility region. Names the
    first violating time node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class Unsupported(SqbsdeError, NotImplementedError):
    """Requested combination is outside this solver's documented scope."""
