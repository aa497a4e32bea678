"""Exception hierarchy shared across the simulator."""


class RouteFLError(Exception):
    """Base class for all simulator errors."""


class ShapeError(RouteFLError, ValueError):
    pass


class ParameterError(RouteFLError, ValueError):
    """Invalid hyperparameter such as a non-positive temperature or step size."""


class UsageError(RouteFLError, RuntimeError):
    """An operation was called in the wrong mode or on the wrong kind of value."""


class VocabularyError(RouteFLError, IndexError):
    pass


class ConfigError(RouteFLError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ProtocolError(RouteFLError, ValueError):
    """Client updates that cannot be combined (mismatched names or shapes)."""


class RoundError(RouteFLError, RuntimeError):
    pass


class MetricError(RouteFLError, ValueError):
    pass
