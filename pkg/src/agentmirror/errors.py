"""Exception hierarchy shared by every layer of the runtime."""


class MirrorError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MirrorError, ValueError):
    pass


# state model

class InvalidValue(MirrorError, ValueError):
    pass


class MalformedBlob(MirrorError, ValueError):
    def __init__(self, reason: str, offset: int):
        super().__init__(f"{reason} at byte offset {offset}")
        self.reason = reason
        self.offset = offset


class VersionMismatch(MirrorError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"version mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class NoChange(MirrorError, ValueError):
    pass


# transport

class MalformedFrame(MirrorError, ValueError):
    def __init__(self, reason: str, offset: int):
        super().__init__(f"{reason} at byte offset {offset}")
        self.reason = reason
        self.offset = offset


class Disconnected(MirrorError, ConnectionError):
    pass


class Closed(MirrorError):
    pass


class OversizePayload(MirrorError, ValueError):
    pass


class UnsupportedOnSocket(MirrorError):
    pass


class AddressInUse(MirrorError, OSError):
    pass


# runtime

class DuplicateName(MirrorError, KeyError):
    pass


class UnknownAgent(MirrorError, KeyError):
    pass


class AgentNotRunning(MirrorError, RuntimeError):
    pass


# mirror protocol

class CloneExists(MirrorError):
    pass


class NoBinding(MirrorError):
    pass


class CloneUnreachable(MirrorError):
    pass


class WorkerUnreachable(MirrorError):
    pass


# store baseline

class StaleVersion(MirrorError):
    def __init__(self, name: str, stored: int, got: int):
        super().__init__(f"stale version for {name!r}: stored {stored}, got {got}")
        self.name = name
        self.stored = stored
        self.got = got


class StoreIO(MirrorError, OSError):
    pass


# auction / bench

class TooManyKills(MirrorError, ValueError):
    pass


class RecoveryFailed(MirrorError):
    pass


class BenchAborted(MirrorError):
    pass


class UnsupportedPlatformCounter(MirrorError):
    pass
