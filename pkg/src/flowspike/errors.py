"""Exception hierarchy.

Validation problems (bad shapes, bad arguments, malformed files) derive from
``ValueError`` so callers can treat them uniformly; the CLI maps them to exit
code 2.
"""


class FlowSpikeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FlowSpikeError, ValueError):
    """A tensor extent does not match what an operation requires."""

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class ConfigError(FlowSpikeError, ValueError):
    pass


class EventOrderError(FlowSpikeError, ValueError):
    """Events are not sorted by timestamp."""

    def __init__(self, message, index=None, offset=None):
        super().__init__(message)
        self.index = index
        self.offset = offset


class FormatError(FlowSpikeError, ValueError):
    """Malformed binary container. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class TensorCountError(FormatError):
    pass


class TimestampRegressionError(FormatError):
    pass


class CoordinateError(FormatError):
    pass


class PolarityError(FormatError):
    pass


class ProtocolError(FlowSpikeError):
    """Malformed frame on the TCP event stream; ``code`` is sent back to the peer."""

    def __init__(self, message, code):
        super().__init__(message)
        self.code = code
