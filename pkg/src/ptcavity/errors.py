"""Exception types shared across the package."""


class PtCavityError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PtCavityError, ValueError):
    """A configuration value violates a physical invariant.

    ``key_path`` names the offending field (``"crystal.heat_capacity_j_per_k"``)
    when the error comes from a config file.
    """

    def __init__(self, message, key_path=None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class DomainError(PtCavityError, ValueError):
    """An argument is outside the domain of a formula (e.g. non-finite)."""


class SingularityError(PtCavityError, ArithmeticError):
    """A transfer function was evaluated exactly at a pole."""


class IntegrationError(PtCavityError, RuntimeError):
    """The ODE solver could not continue; ``time`` is where it stopped."""

    def __init__(self, message, time):
        self.time = time
        super().__init__(f"{message} (t = {time!r} s)")


class LinearityGuardError(PtCavityError, ValueError):
    """A small-signal probe amplitude is too large for the linear regime."""


class DataError(PtCavityError, ValueError):
    """A dataset is malformed or violates its schema."""
