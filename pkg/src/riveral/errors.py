"""Exception types raised across the package."""


class RiveralError(Exception):
    pass


class ConfigError(RiveralError, ValueError):
    pass


class DimensionError(RiveralError, ValueError):
    pass


class NumericalError(RiveralError, FloatingPointError):
    pass


class GraphError(RiveralError, ValueError):
    """Raised for malformed river graphs (cycles, bad distances)."""


class UnknownSegmentError(RiveralError, KeyError):
    """A segment id referenced somewhere is not part of the graph."""


class DataError(RiveralError, ValueError):
    pass


class EmptyLossError(RiveralError, ValueError):
    """No labeled pairs fall inside the requested window."""


class TrainingError(RiveralError, RuntimeError):
    pass
