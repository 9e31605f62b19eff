"""Exception types raised across the package."""


class KVPruneError(Exception):
    """Base class for all package errors."""


class InvalidInput(KVPruneError, ValueError):
    pass


class InvalidConfig(KVPruneError, ValueError):
    pass


class InvalidHandle(KVPruneError, KeyError):
    pass


class SinkProtected(KVPruneError):
    """An eviction targeted a protected attention-sink slot."""


class InvalidTrace(KVPruneError, ValueError):
    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        if line is not None:
            message = f"line {line} (byte offset {offset}): {message}"
        super().__init__(message)
        self.line = line
        self.offset = offset


class InvalidSpec(KVPruneError, ValueError):
    pass
