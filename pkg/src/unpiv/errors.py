"""Exception types shared across the package."""


class UnpivError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(UnpivError):
    """Input values violate a precondition (non-finite, out of range, wrong rank)."""


class DimensionMismatchError(UnpivError):
    """Two grids that must share dimensions do not."""


class GridTooSmallError(UnpivError):
    """Grid is too small for the requested operation."""


class EstimationFailedError(UnpivError):
    """An estimator could not produce a usable result."""


class FlowFileError(UnpivError):
    """A .flo file is malformed (bad magic, truncated payload, absurd dims)."""


class ConfigError(UnpivError):
    """A key=value config file or a flow spec string could not be parsed."""
