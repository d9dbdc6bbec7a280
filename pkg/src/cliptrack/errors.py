"""Exception types shared across the package."""


class ClipTrackError(Exception):
    """Base class for all package errors."""


class DimensionError(ClipTrackError, ValueError):
    pass


class NumericError(ClipTrackError, ArithmeticError):
    pass


class ContractError(ClipTrackError, RuntimeError):
    pass


class ConfigError(ClipTrackError, ValueError):
    pass


class FormatError(ClipTrackError, ValueError):
    pass


class InfeasibleError(ClipTrackError, ValueError):
    """More targets than free slots to assign them to."""


class InvariantError(ClipTrackError, RuntimeError):
    pass


class SizeError(ClipTrackError, ValueError):
    pass
