"""Exception types raised across the package."""


class MiguError(Exception):
    """Base class for package errors."""


class ShapeError(MiguError, ValueError):
    pass


class StateError(MiguError, RuntimeError):
    """Raised on use of missing or stale cached state."""


class NumericError(MiguError, FloatingPointError):
    pass


class ConfigError(MiguError, ValueError):
    pass


class ChecksumError(MiguError, IOError):
    pass


class VersionError(MiguError, ValueError):
    pass


class ContractError(MiguError, ValueError):
    """Raised when arguments violate a documented precondition."""
