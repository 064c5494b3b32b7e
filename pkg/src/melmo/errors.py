"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so each class names a failure category
rather than a call site.
"""


class MelmoError(Exception):
    """Base class for all package errors."""


class DimensionError(MelmoError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MelmoError, ValueError):
    """A caller violated an operation's precondition."""


class IngestionError(MelmoError, ValueError):
    """Input data is empty or malformed."""


class OracleError(MelmoError, RuntimeError):
    """A verification oracle could not produce a trustworthy answer."""


class UndefinedMetricError(MelmoError, ValueError):
    """A metric is undefined for the given truth vector (single class)."""


class NumericAbort(MelmoError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""
