"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (config 2, data 3, contract 4).
"""


class FleetflowError(Exception):
    """Base class for all package errors."""


class ConfigError(FleetflowError):
    """A run was configured inconsistently (bad flags, bad config file)."""


class DataError(FleetflowError):
    """Input data violates its documented schema or invariants."""


class ContractViolation(FleetflowError):
    """An internal invariant broke; indicates a bug, not bad input."""
