"""Exception types shared across the toolkit."""


class SpmeidError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SpmeidError):
    """Invalid configuration value or file."""


class PhysicsDomainError(SpmeidError, ValueError):
    """An input left the physically admissible domain (e.g. stoichiometry
    outside (0, 1), saturated electrode surface)."""


class SimulationError(SpmeidError):
    """Forward simulation failed (cutoff breach, numerical instability)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class StoichiometryError(SpmeidError):
    """The initial-stoichiometry system has no solution for these
    parameters ("infeasible parameter set")."""

    def __init__(self, message, cause=None):
        super().__init__(message)
        self.cause = cause


class AutodiffError(SpmeidError):
    """Misuse of the reverse-mode tape (stale tape, shape mismatch)."""
