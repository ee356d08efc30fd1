"""Exception and warning types raised by entrocal."""

from __future__ import annotations


class EntrocalError(Exception):
    """Base class for all entrocal errors."""


class DomainError(EntrocalError, ValueError):
    """An argument lies outside the domain of an entropy or its conjugate."""


class InvalidLink(EntrocalError, ValueError):
    """The inverse propensity 1/pi is not increasing, so no convex conjugate exists."""


class ConfigError(EntrocalError, ValueError):
    """Malformed configuration, scenario or input file."""


class MissingColumn(ConfigError):
    pass


class NonpositiveWeight(ConfigError):
    pass


class MissingIntercept(EntrocalError, ValueError):
    """No vector ``a`` with ``design @ a == 1`` exists."""


class SingularGram(EntrocalError, ArithmeticError):
    pass


class DebiasTotalUnavailable(EntrocalError):
    """The population total of the debiasing regressor cannot be evaluated."""


class SolverError(EntrocalError, ArithmeticError):
    """Numerical failure of the dual solver.

    ``diagnostics`` carries the JSON-ready solver record at the point of
    failure, and ``solution`` the last iterate when one exists.
    """

    def __init__(self, message, diagnostics=None, solution=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.solution = solution


class NonConvergence(SolverError):
    pass


class SingularHessian(SolverError):
    pass


class Infeasible(SolverError):
    pass


class AllInfeasible(SolverError):
    pass


class EntrocalWarning(UserWarning):
    pass


class MissingInterceptWarning(EntrocalWarning):
    pass


class ClippedMajority(EntrocalWarning):
    """Too many trimmed units for a nonsingular Newton system; a ridge was added."""


class NegativeVariance(EntrocalWarning):
    pass


class IllConditioned(EntrocalWarning):
    pass


class PropensityAboveOne(EntrocalWarning):
    """Some fitted propensities exceed one (step-1 weights below one)."""


class TrimBoundWarning(EntrocalWarning):
    pass
