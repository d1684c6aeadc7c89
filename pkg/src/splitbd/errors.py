"""Shared exception types.

Everything raised on purpose by this package derives from SplitbdError so
callers (and the CLI) can distinguish our failures from genuine bugs.
"""


class SplitbdError(Exception):
    pass


class IngestionError(SplitbdError):
    """Dataset files missing, truncated, or carrying a bad magic number."""


class FormatError(SplitbdError):
    """A serialized blob (frame, parameter file, recorder file) violates its schema."""


class DimensionError(SplitbdError):
    """Tensor shapes do not line up with what an operation requires."""


class ConfigurationError(SplitbdError):
    """Invalid configuration: unknown keys, bad split, impossible architecture."""


class ProtocolViolation(SplitbdError):
    """A session peer sent a message that is out of order or otherwise illegal."""


class SessionError(SplitbdError):
    """Transport/session lifecycle misuse (send after end, dead peer, ...)."""


class StateError(SplitbdError):
    """Stateful object misuse, e.g. consuming a forward context twice."""
