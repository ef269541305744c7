"""Exception hierarchy shared by every module."""


class DepthQueryError(Exception):
    """Base class for all library errors."""


class ShapeError(DepthQueryError):
    """Tensor extents do not line up for the requested operation."""


class DomainError(DepthQueryError):
    """An argument is outside the operation's mathematical domain."""


class InputError(DepthQueryError):
    """User-supplied data (tokens, spans, labels, lists) is invalid."""


class FormatError(DepthQueryError):
    """A serialized file is malformed. Carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(DepthQueryError):
    """A configuration object violates its invariants."""


class TrainingError(DepthQueryError):
    """Optimization failed, e.g. a non-finite gradient."""
