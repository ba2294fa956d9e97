"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: numeric failures exit with 4, every
other contract violation with 3.
"""


class GatedFusionError(Exception):
    """Base class for all package errors."""


class ContractError(GatedFusionError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError, ValueError):
    pass


class DomainError(ContractError, ValueError):
    pass


class StateError(ContractError, RuntimeError):
    pass


class FormatError(ContractError, ValueError):
    pass


class ConsistencyError(ContractError, ValueError):
    pass


class ConfigurationError(ContractError, ValueError):
    pass


class UndefinedMetricError(ContractError, ValueError):
    pass


class NumericError(GatedFusionError, ArithmeticError):
    """NaN/Inf encountered in a loss, gradient or parameter."""
