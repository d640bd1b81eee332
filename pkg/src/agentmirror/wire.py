"""Bodies of the control messages exchanged by agents.

State-carrying bodies reuse the blob codec from :mod:`agentmirror.state`;
everything else is a handful of big-endian integers and agent ids written as
``[u16 length][canonical text]``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .ids import AgentId

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_BID_CALL = struct.Struct(">IQQ")
_BID = struct.Struct(">IBQ")


class Phase(enum.IntEnum):
    JOIN = 0
    READY = 1
    REJOIN = 2
    REJOIN_REQUEST = 3


class EnvMode(enum.IntEnum):
    CAS = 0  # apply only if from_version matches
    APPEND = 1  # rebase the ops onto the current version


PING = b"\x00"
PONG = b"\x01"


def pack_u64(v: int) -> bytes:
    return _U64.pack(v)


def unpack_u64(payload: bytes) -> int:
    if len(payload) != 8:
        raise ValueError(f"expected 8 bytes, got {len(payload)}")
    return _U64.unpack(payload)[0]


def pack_aid(aid: AgentId | None) -> bytes:
    if aid is None:
        return _U16.pack(0)
    raw = str(aid).encode("utf-8")
    return _U16.pack(len(raw)) + raw


def read_aid(buf: bytes, pos: int) -> tuple[AgentId | None, int]:
    (n,) = _U16.unpack_from(buf, pos)
    pos += 2
    if n == 0:
        return None, pos
    return AgentId.parse(buf[pos:pos + n].decode("utf-8")), pos + n


def pack_blob(blob: bytes) -> bytes:
    return _U32.pack(len(blob)) + blob


def read_blob(buf: bytes, pos: int) -> tuple[bytes, int]:
    (n,) = _U32.unpack_from(buf, pos)
    pos += 4
    return buf[pos:pos + n], pos + n


@dataclass(frozen=True)
class BindingInfo:
    """What a worker or clone reports about its pairing."""
    peer: AgentId
    conversation: bytes
    version: int

    def pack(self) -> bytes:
        return b"\x01" + pack_aid(self.peer) + self.conversation + _U64.pack(self.version)

    @staticmethod
    def read(buf: bytes, pos: int) -> tuple[BindingInfo | None, int]:
        if buf[pos] == 0:
            return None, pos + 1
        peer, pos = read_aid(buf, pos + 1)
        conv = buf[pos:pos + 16]
        (version,) = _U64.unpack_from(buf, pos + 16)
        return BindingInfo(peer, conv, version), pos + 24


def pack_binding(info: BindingInfo | None) -> bytes:
    return b"\x00" if info is None else info.pack()


def register(phase: Phase, body: bytes = b"") -> bytes:
    return _U8.pack(phase) + body


def split_phase(payload: bytes) -> tuple[Phase, bytes]:
    return Phase(payload[0]), payload[1:]


def bid_call(round_no: int, price: int, increment: int) -> bytes:
    return _BID_CALL.pack(round_no, price, increment)


def read_bid_call(payload: bytes) -> tuple[int, int, int]:
    return _BID_CALL.unpack(payload)


def bid(round_no: int, amount: int | None) -> bytes:
    return _BID.pack(round_no, 0 if amount is None else 1, amount or 0)


def read_bid(payload: bytes) -> tuple[int, int | None]:
    round_no, placed, amount = _BID.unpack(payload)
    return round_no, amount if placed else None


def aid_list(kind: int, aids) -> bytes:
    return _U8.pack(kind) + _U16.pack(len(aids)) + b"".join(pack_aid(a) for a in aids)


def read_aid_list(payload: bytes) -> tuple[int, list[AgentId]]:
    kind = payload[0]
    (count,) = _U16.unpack_from(payload, 1)
    pos = 3
    out = []
    for _ in range(count):
        aid, pos = read_aid(payload, pos)
        out.append(aid)
    return kind, out
