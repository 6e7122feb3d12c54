"""Exception types shared across the package."""


class CollabMapError(Exception):
    pass


class DegenerateGeometry(CollabMapError):
    """Insufficient parallax, collinear points or an otherwise ill-posed estimate."""


class PnPFailed(CollabMapError):
    """A frame could not be resected against the given 3D points."""


class NoInitialPair(CollabMapError):
    pass


class EmptyReconstruction(CollabMapError):
    pass


class ModeMismatch(CollabMapError):
    pass


class MalformedMessage(CollabMapError):
    pass


class Disconnect(CollabMapError):
    pass


class OutOfOrderFrame(CollabMapError):
    pass


class UnknownFrame(CollabMapError):
    pass


class InsufficientOverlap(CollabMapError):
    pass


class InvalidConfig(CollabMapError):
    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class InvalidPlan(CollabMapError):
    pass


class UnknownPreset(CollabMapError):
    pass


class ManifestMismatch(CollabMapError):
    pass


class ParseError(CollabMapError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line
