"""Exception types shared across the package."""


class SshrError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigError(SshrError, ValueError):
    """Invalid configuration or malformed operands (shape/width mismatches)."""


class NonFiniteError(SshrError, FloatingPointError):
    """A forward computation produced NaN or Inf."""


class CtcInfeasibleError(SshrError, ValueError):
    """The frame sequence is too short to ever emit the target sequence."""


class CorruptDataError(SshrError, IOError):
    """On-disk corpus data failed an integrity check."""
