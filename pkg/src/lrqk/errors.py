"""Exceptions shared across the package."""


class NonFiniteError(ValueError):
    """A matrix contains NaN or Inf where finite values are required."""


class SolveFailedError(RuntimeError):
    """A small SPD solve failed even after diagonal jitter."""


class CorruptTraceError(ValueError):
    """Trace file has a bad magic, bad record, or truncated payload."""


class UnsupportedVersionError(ValueError):
    """Trace file declares a version this reader does not understand."""
