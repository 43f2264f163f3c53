"""Exception types shared across the package."""


class BasketGprError(Exception):
    """Base class for all package errors."""


class ConfigError(BasketGprError):
    """A run configuration violates a documented precondition."""


class NumericalError(BasketGprError):
    """A numerical routine failed (factorization, domain, degeneracy)."""


class NotPositiveDefinite(NumericalError):
    """Cholesky factorization failed even after jitter escalation."""


class DomainError(NumericalError):
    """Argument outside the mathematical domain of the function."""


class DegenerateTargets(NumericalError):
    """Regression targets are constant; no hyperparameters can be fitted."""


class UncachedDate(ConfigError):
    """A valuation date has no precomputed covariance factor."""


class WrongPayoff(ConfigError):
    """Operation only defined for a different payoff family."""


class DimensionTooLarge(ConfigError):
    """Lattice/tree methods refuse dimensions beyond their cap."""


class NonPositiveVariance(ConfigError):
    """Variance-ratio statistics need strictly positive variances."""


class UnknownTable(ConfigError):
    """Requested reproduction table id does not exist."""
