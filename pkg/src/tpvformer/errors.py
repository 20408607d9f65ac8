"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so library code raises the
narrowest class that fits instead of a bare ``ValueError``.
"""


class TPVError(Exception):
    """Base class for all package errors."""


class ConfigError(TPVError, ValueError):
    """Invalid configuration value or combination."""


class DataError(TPVError, ValueError):
    """Malformed or inconsistent input data or file."""


class ShapeError(TPVError, ValueError):
    """Tensor extents do not satisfy an operation's contract."""


class ContractError(TPVError, ValueError):
    """A caller violated an operation precondition."""


class NumericError(TPVError, ArithmeticError):
    """NaN or Inf surfaced by a validation pass."""


class ResourceError(TPVError, MemoryError):
    """A request would exceed a configured memory budget."""


class RoutingError(ContractError):
    """Loss routing demands an input that was not supplied."""


class UndefinedLossError(ContractError):
    """Loss is undefined because nothing is labeled."""
