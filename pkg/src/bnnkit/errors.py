"""Exception hierarchy shared by every module."""


class BNNError(Exception):
    """Base class for toolkit errors."""


class InvalidValue(BNNError, ValueError):
    """A tensor element outside its allowed value set."""


class InvalidParam(BNNError, ValueError):
    """A parameter violating its precondition (zero, non-finite, unknown kind)."""


class ShapeError(BNNError, ValueError):
    pass


class DegenerateChannel(BNNError, ValueError):
    """A channel whose fused scale is zero, so no threshold exists."""

    def __init__(self, message, channels=()):
        super().__init__(message)
        self.channels = tuple(int(c) for c in channels)


class GraphError(BNNError):
    pass


class ParseError(BNNError, ValueError):
    """Malformed serialized input. ``location`` names the offending field."""

    def __init__(self, message, location=""):
        if location:
            message = f"{location}: {message}"
        super().__init__(message)
        self.location = location
