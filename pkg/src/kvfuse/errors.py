"""Exception hierarchy shared across kvfuse modules."""


class KvFuseError(Exception):
    """Base class for all kvfuse errors."""


class InvalidCacheError(KvFuseError):
    """Cache tensors are malformed (wrong shape, NaN/Inf entries)."""


class AlignmentError(KvFuseError):
    """Chunking parameters do not align with block boundaries."""


class ZeroVectorError(KvFuseError):
    """Cosine similarity requested for an all-zero vector."""


class ConfigError(KvFuseError):
    """Invalid configuration value (threshold out of range, bad policy)."""


class CorruptionError(KvFuseError):
    """Block-table state is internally inconsistent (dangling ids, bad refcounts)."""


class FormatError(KvFuseError):
    """Malformed KVFF file.

    Carries the byte offset at which the problem was detected, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InsufficientDataError(KvFuseError):
    """An operation needs more samples than were provided."""


class DomainError(KvFuseError):
    """Numeric argument outside the operation's domain."""


class DivergenceError(DomainError):
    """Compression-ratio prediction outside its validity regime (denominator <= 0)."""
