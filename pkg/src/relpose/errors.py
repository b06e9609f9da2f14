"""Exception hierarchy.

Every error carries a short category name (the class name) that the CLI
prints on stderr, so callers can branch on it without parsing messages.
"""


class RelPoseError(Exception):
    @property
    def category(self) -> str:
        return type(self).__name__


class NearZeroQuaternion(RelPoseError, ValueError):
    pass


class BadQuaternion(RelPoseError, ValueError):
    pass


class DegenerateScale(RelPoseError, ValueError):
    pass


class DegenerateDirection(RelPoseError, ValueError):
    pass


class ShapeMismatch(RelPoseError, ValueError):
    pass


class NonFiniteValue(RelPoseError, FloatingPointError):
    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class NonScalarRoot(RelPoseError, ValueError):
    pass


class IndexOutOfRange(RelPoseError, IndexError):
    pass


class TooSmall(RelPoseError, ValueError):
    pass


class BadChannelCount(RelPoseError, ValueError):
    pass


class ParseError(RelPoseError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyDataset(RelPoseError, ValueError):
    pass


class EmptyInput(RelPoseError, ValueError):
    pass


class DegenerateGeometry(RelPoseError, ValueError):
    pass


class BadRatios(RelPoseError, ValueError):
    pass


class ConfigError(RelPoseError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class CheckpointMismatch(RelPoseError, ValueError):
    pass


class FormatError(RelPoseError, ValueError):
    """Malformed binary file (bad magic, truncated payload)."""
