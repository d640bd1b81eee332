"""Agent and platform identifiers.

An :class:`AgentId` is the unit of addressing: a name that is unique on one
platform plus the platform's address. Both types have a canonical text form
that parses back to an equal value, which is what goes on the wire.
"""

from __future__ import annotations

from dataclasses import dataclass

_FORBIDDEN = frozenset("@/")


def _has_control(text: str) -> bool:
    return any(ord(ch) < 0x20 or 0x7F <= ord(ch) < 0xA0 for ch in text)


def _check_token(kind: str, text: str, allow_space: bool = True) -> None:
    if not isinstance(text, str) or not text:
        raise ValueError(f"{kind} must be a non-empty string")
    if (
        any(ch in _FORBIDDEN for ch in text)
        or _has_control(text)
        or (not allow_space and any(ch.isspace() for ch in text))
    ):
        raise ValueError(f"{kind} {text!r} contains a forbidden character")
    try:
        text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise ValueError(f"{kind} {text!r} is not valid UTF-8") from exc


@dataclass(frozen=True, slots=True)
class PlatformAddress:
    platform_name: str
    host: str
    port: int

    def __post_init__(self):
        _check_token("platform_name", self.platform_name)
        _check_token("host", self.host, allow_space=False)
        if isinstance(self.port, bool) or not isinstance(self.port, int) or not 1 <= self.port <= 65535:
            raise ValueError(f"port must be an integer in 1..65535, got {self.port!r}")

    def __str__(self) -> str:
        return f"{self.platform_name}@{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> PlatformAddress:
        name, sep, hostport = text.partition("@")
        host, sep2, port = hostport.rpartition(":")
        if not sep or not sep2:
            raise ValueError(f"not a platform address: {text!r}")
        if not port.isdigit() or not port.isascii() or str(int(port)) != port:
            raise ValueError(f"non-canonical port in {text!r}")
        return cls(name, host, int(port))


@dataclass(frozen=True, slots=True)
class AgentId:
    name: str
    platform: PlatformAddress

    def __post_init__(self):
        _check_token("agent name", self.name)

    def __str__(self) -> str:
        return f"{self.name}@{self.platform}"

    @classmethod
    def parse(cls, text: str) -> AgentId:
        name, sep, rest = text.partition("@")
        if not sep:
            raise ValueError(f"not an agent id: {text!r}")
        return cls(name, PlatformAddress.parse(rest))
