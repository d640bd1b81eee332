"""Typed envelopes and the two ways of moving them between platforms.

Delivery contract, both modes: at-most-once, FIFO per (sender, receiver).
The in-process network schedules deliveries on a loop and supports fault
injection; the socket endpoint speaks the length-prefixed frame format over
TCP and does not.

Frame layout (big-endian)::

    length:u32 | proto:u8 (=1) | type:u8 | sender_len:u16 | sender |
    receiver_len:u16 | receiver | conversation:16 | seq:u64 |
    payload_len:u32 | payload

``length`` counts every byte after itself.
"""

from __future__ import annotations

import collections
import enum
import errno
import logging
import random
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Protocol

from .errors import (
    AddressInUse,
    Closed,
    Disconnected,
    MalformedFrame,
    OversizePayload,
    UnsupportedOnSocket,
)
from .ids import AgentId, PlatformAddress

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024
CONVERSATION_BYTES = 16
_U64_MAX = (1 << 64) - 1

_HEAD = struct.Struct(">IBB")
_U16 = struct.Struct(">H")
_TAIL = struct.Struct(">QI")


class MessageType(enum.IntEnum):
    AID_EXCHANGE = 1
    CLONE_REQUEST = 2
    CLONE_ACK = 3
    SYNC_UPDATE = 4
    SYNC_ACK = 5
    HEARTBEAT = 6
    RECOVER_REQUEST = 7
    RECOVER_REPLY = 8
    BID_CALL = 9
    BID = 10
    AUCTION_RESULT = 11
    REGISTER = 12
    REGISTER_ACK = 13


_TYPES = {int(m): m for m in MessageType}


@dataclass(frozen=True, slots=True)
class Envelope:
    msg_type: MessageType
    sender: AgentId
    receiver: AgentId
    conversation: bytes
    seq: int
    payload: bytes = b""

    def __post_init__(self):
        if len(self.conversation) != CONVERSATION_BYTES:
            raise ValueError("conversation id must be 16 bytes")
        if not 0 <= self.seq <= _U64_MAX:
            raise ValueError("seq must be an unsigned 64-bit integer")


def new_conversation(rng: random.Random) -> bytes:
    return rng.getrandbits(128).to_bytes(CONVERSATION_BYTES, "big")


def encode_envelope(env: Envelope) -> bytes:
    if len(env.payload) > MAX_PAYLOAD:
        raise OversizePayload(f"payload of {len(env.payload)} bytes exceeds {MAX_PAYLOAD}")
    sender = str(env.sender).encode("utf-8")
    receiver = str(env.receiver).encode("utf-8")
    body_len = 2 + 2 + len(sender) + 2 + len(receiver) + CONVERSATION_BYTES + 12 + len(env.payload)
    return b"".join((
        _HEAD.pack(body_len, PROTOCOL_VERSION, int(env.msg_type)),
        _U16.pack(len(sender)), sender,
        _U16.pack(len(receiver)), receiver,
        env.conversation,
        _TAIL.pack(env.seq, len(env.payload)),
        env.payload,
    ))


def decode_envelope(frame: bytes) -> Envelope:
    """Inverse of :func:`encode_envelope`. Rejects malformed frames with an offset."""
    buf = bytes(frame)
    n = len(buf)
    if n < _HEAD.size:
        raise MalformedFrame("truncated header", n)
    length, proto, code = _HEAD.unpack_from(buf, 0)
    if length != n - 4:
        raise MalformedFrame(f"length prefix says {length} bytes, frame carries {n - 4}", 0)
    if proto != PROTOCOL_VERSION:
        raise MalformedFrame(f"unsupported protocol version {proto}", 4)
    if code not in _TYPES:
        raise MalformedFrame(f"unknown message type {code}", 5)
    pos = 6

    def aid(pos: int) -> tuple[AgentId, int]:
        if pos + 2 > n:
            raise MalformedFrame("truncated agent id length", pos)
        (k,) = _U16.unpack_from(buf, pos)
        start = pos + 2
        if start + k > n:
            raise MalformedFrame("truncated agent id", start)
        try:
            return AgentId.parse(buf[start:start + k].decode("utf-8")), start + k
        except (UnicodeDecodeError, ValueError):
            raise MalformedFrame("invalid agent id", start) from None

    sender, pos = aid(pos)
    receiver, pos = aid(pos)
    if pos + CONVERSATION_BYTES + _TAIL.size > n:
        raise MalformedFrame("truncated conversation/seq/payload length", pos)
    conversation = buf[pos:pos + CONVERSATION_BYTES]
    pos += CONVERSATION_BYTES
    seq, plen = _TAIL.unpack_from(buf, pos)
    pos += _TAIL.size
    if plen > MAX_PAYLOAD:
        raise MalformedFrame("payload exceeds 16 MiB", pos - 4)
    if pos + plen != n:
        raise MalformedFrame("payload length does not match frame", pos)
    return Envelope(_TYPES[code], sender, receiver, conversation, seq, buf[pos:])


class Sink(Protocol):
    def put(self, env: Envelope) -> None: ...


class Inbox:
    """Thread-safe FIFO of delivered envelopes with a single consumer."""

    def __init__(self):
        self._items: collections.deque[Envelope] = collections.deque()
        self._cond = threading.Condition()
        self._closed = False

    def put(self, env: Envelope) -> None:
        with self._cond:
            if self._closed:
                return
            self._items.append(env)
            self._cond.notify()

    def recv(self, timeout: float | None = None) -> Envelope:
        """Next envelope; blocks while empty. Raises Closed once closed and drained."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._items or self._closed, timeout):
                raise TimeoutError("no envelope within timeout")
            if self._items:
                return self._items.popleft()
            raise Closed("inbox closed")

    def recv_nowait(self) -> Envelope | None:
        with self._cond:
            if self._items:
                return self._items.popleft()
            if self._closed:
                raise Closed("inbox closed")
            return None

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self) -> int:
        return len(self._items)


# faults (in-process only)

@dataclass(frozen=True)
class DropNext:
    n: int = 1


@dataclass(frozen=True)
class Delay:
    seconds: float


@dataclass(frozen=True)
class Sever:
    pass


@dataclass(frozen=True)
class DropRate:
    """Drop each outbound envelope independently with probability ``p``."""
    p: float
    seed: int = 0


@dataclass(frozen=True)
class Repair:
    """Clear every fault on the endpoint."""


class InProcessEndpoint:
    mode = "inproc"

    def __init__(self, network: InProcessNetwork, address: PlatformAddress, sink: Sink):
        self.network = network
        self.address = address
        self.sink = sink
        self.closed = False
        self.severed = False
        self.drop_next = 0
        self.extra_delay = 0.0
        self.drop_rate = 0.0
        self._drop_rng = random.Random(0)
        self.sent = 0
        self.dropped = 0

    def send(self, env: Envelope) -> None:
        if self.closed:
            raise Disconnected(f"endpoint {self.address} is closed")
        if len(env.payload) > MAX_PAYLOAD:
            raise OversizePayload(f"payload of {len(env.payload)} bytes exceeds {MAX_PAYLOAD}")
        dst = self.network._endpoints.get(env.receiver.platform)
        if dst is None or dst.closed:
            raise Disconnected(f"no platform listening at {env.receiver.platform}")
        if self.severed or dst.severed:
            raise Disconnected(f"link between {self.address} and {dst.address} is severed")
        self.sent += 1
        if self.drop_next > 0:
            self.drop_next -= 1
            self.dropped += 1
            return
        if self.drop_rate and self._drop_rng.random() < self.drop_rate:
            self.dropped += 1
            return
        self.network._transmit(self, dst, env)

    def inject_fault(self, fault) -> None:
        if isinstance(fault, DropNext):
            self.drop_next += fault.n
        elif isinstance(fault, Delay):
            self.extra_delay = fault.seconds
        elif isinstance(fault, Sever):
            self.severed = True
        elif isinstance(fault, DropRate):
            self.drop_rate = fault.p
            self._drop_rng = random.Random(fault.seed)
        elif isinstance(fault, Repair):
            self.severed = False
            self.drop_next = 0
            self.extra_delay = 0.0
            self.drop_rate = 0.0
        else:
            raise TypeError(f"unknown fault {fault!r}")

    def close(self) -> None:
        self.closed = True
        self.network._endpoints.pop(self.address, None)


class InProcessNetwork:
    """Delivers envelopes between endpoints on a shared loop.

    Each delivery is scheduled ``latency`` plus a seeded random jitter in
    ``[0, jitter]`` after the send, then pushed back so it never overtakes an
    earlier envelope between the same two agents. The same seed therefore
    gives the same delivery trace.
    """

    def __init__(self, loop, latency: float = 0.0, jitter: float = 0.0, seed: int = 0,
                 record_trace: bool = False):
        self.loop = loop
        self.latency = latency
        self.jitter = jitter
        self._rng = random.Random(seed)
        self._endpoints: dict[PlatformAddress, InProcessEndpoint] = {}
        self._last: dict[tuple[AgentId, AgentId], float] = {}
        self.trace: list[tuple] | None = [] if record_trace else None

    def open(self, address: PlatformAddress, sink: Sink) -> InProcessEndpoint:
        if address in self._endpoints:
            raise AddressInUse(f"{address} already bound")
        ep = InProcessEndpoint(self, address, sink)
        self._endpoints[address] = ep
        return ep

    def _transmit(self, src: InProcessEndpoint, dst: InProcessEndpoint, env: Envelope) -> None:
        when = self.loop.now() + self.latency + src.extra_delay
        if self.jitter:
            when += self._rng.uniform(0.0, self.jitter)
        key = (env.sender, env.receiver)
        last = self._last.get(key)
        if last is not None and when < last:
            when = last
        self._last[key] = when
        self.loop.call_at(when, self._deliver, src, dst, env)

    def _deliver(self, src: InProcessEndpoint, dst: InProcessEndpoint, env: Envelope) -> None:
        if dst.closed or dst.severed or src.severed:
            return
        if self.trace is not None:
            self.trace.append((self.loop.now(), str(env.sender), str(env.receiver), env.msg_type.name, env.seq))
        dst.sink.put(env)


class SocketEndpoint:
    """TCP endpoint: one listening socket, one outbound connection per peer."""

    mode = "socket"

    def __init__(self, address: PlatformAddress, sink: Sink, loop=None, connect_timeout: float = 2.0):
        self.address = address
        self.sink = sink
        self.loop = loop
        self.connect_timeout = connect_timeout
        self.closed = False
        self._out: dict[tuple[str, int], socket.socket] = {}
        self._out_lock = threading.Lock()
        self._conns: list[socket.socket] = []
        self._server = socket.socket(socket.AF_INET6 if ":" in address.host else socket.AF_INET)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._server.bind((address.host, address.port))
        except OSError as exc:
            self._server.close()
            if exc.errno == errno.EADDRINUSE:
                raise AddressInUse(f"{address} already bound") from exc
            raise
        self._server.listen(64)
        self._accepter = threading.Thread(target=self._accept_loop, name=f"accept-{address}", daemon=True)
        self._accepter.start()

    def _deliver(self, env: Envelope) -> None:
        if self.loop is not None:
            self.loop.call_soon_threadsafe(self.sink.put, env)
        else:
            self.sink.put(env)

    def _accept_loop(self) -> None:
        while not self.closed:
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: socket.socket) -> None:
        def read_exact(n: int) -> bytes | None:
            chunks = []
            while n:
                try:
                    chunk = conn.recv(n)
                except OSError:
                    return None
                if not chunk:
                    return None
                chunks.append(chunk)
                n -= len(chunk)
            return b"".join(chunks)

        while not self.closed:
            head = read_exact(4)
            if head is None:
                break
            (length,) = struct.unpack(">I", head)
            if length > MAX_PAYLOAD + 4096:
                log.warning("dropping connection: frame of %d bytes", length)
                break
            body = read_exact(length)
            if body is None:
                break
            try:
                env = decode_envelope(head + body)
            except MalformedFrame as exc:
                log.warning("dropping connection on malformed frame: %s", exc)
                break
            self._deliver(env)
        conn.close()

    def send(self, env: Envelope) -> None:
        if self.closed:
            raise Disconnected(f"endpoint {self.address} is closed")
        frame = encode_envelope(env)
        peer = (env.receiver.platform.host, env.receiver.platform.port)
        with self._out_lock:
            sock = self._out.get(peer)
            try:
                if sock is None:
                    sock = socket.create_connection(peer, timeout=self.connect_timeout)
                    sock.settimeout(None)
                    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    self._out[peer] = sock
                sock.sendall(frame)
            except OSError as exc:
                if sock is not None:
                    sock.close()
                self._out.pop(peer, None)
                raise Disconnected(f"cannot reach {env.receiver.platform}: {exc}") from exc

    def inject_fault(self, fault) -> None:
        raise UnsupportedOnSocket("fault injection is only available on in-process endpoints")

    def close(self) -> None:
        self.closed = True
        try:
            self._server.close()
        except OSError:
            pass
        with self._out_lock:
            for s in self._out.values():
                s.close()
            self._out.clear()
        for c in self._conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()


def send(endpoint, env: Envelope) -> None:
    endpoint.send(env)


def recv(inbox: Inbox, timeout: float | None = None) -> Envelope:
    return inbox.recv(timeout)


def inject_fault(endpoint, fault) -> None:
    endpoint.inject_fault(fault)
