"""Exception hierarchy shared across the package."""


class SRKDError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SRKDError, ValueError):
    """Invalid configuration value or unknown config key."""


class DataError(SRKDError, ValueError):
    """Inconsistent data passed between pipeline stages."""


class ParseError(SRKDError, ValueError):
    """Malformed point-cloud file; message names the offending line/record."""


class ShapeError(SRKDError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(SRKDError, ArithmeticError):
    """A non-finite value appeared where finite math was required."""


class TapeError(SRKDError, RuntimeError):
    """Misuse of the gradient tape (e.g. backward on a non-scalar)."""


class UndefinedLossError(SRKDError, ValueError):
    """A loss reduction had zero valid elements."""


class PairingError(SRKDError, ValueError):
    """Student/teacher supervoxel views disagree on masks or weights."""
