"""Durable store baseline: every state change is flushed to disk before it counts.

Each shard is an append-only log. A record is::

    length:u32 | name_len:u16 | name | version:u64 | blob_len:u32 | blob | crc32:u32

``length`` counts everything after itself and the CRC covers the bytes
between the length and the CRC. On open the log is scanned to rebuild the
in-memory index; a torn or corrupt tail is cut off.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import zlib
from pathlib import Path

from .errors import StaleVersion, StoreIO, UnknownAgent
from .ids import AgentId
from .mirror import _await_recovery
from .state import LocalState, decode_snapshot, encode_snapshot

log = logging.getLogger(__name__)

_LEN = struct.Struct(">I")
_U16 = struct.Struct(">H")
_VER_BLOB = struct.Struct(">QI")


def _key(agent) -> str:
    return agent.name if isinstance(agent, AgentId) else agent


def encode_record(name: str, version: int, blob: bytes) -> bytes:
    raw = name.encode("utf-8")
    body = b"".join((_U16.pack(len(raw)), raw, _VER_BLOB.pack(version, len(blob)), blob))
    crc = zlib.crc32(body)
    return _LEN.pack(len(body) + 4) + body + _LEN.pack(crc)


class _Shard:
    def __init__(self, path: Path, fsync: bool):
        self.path = path
        self.fsync = fsync
        self.index: dict[str, tuple[int, int, int]] = {}  # name -> (version, blob offset, blob len)
        self.torn_bytes = 0
        try:
            self.fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o644)
            self._scan()
        except OSError as exc:
            raise StoreIO(f"cannot open {path}: {exc}") from exc

    def _scan(self) -> None:
        size = os.fstat(self.fd).st_size
        data = os.pread(self.fd, size, 0) if size else b""
        pos = 0
        while pos < size:
            if pos + 4 > size:
                break
            (length,) = _LEN.unpack_from(data, pos)
            end = pos + 4 + length
            if length < 2 + 12 + 4 or end > size:
                break
            body = data[pos + 4:end - 4]
            (crc,) = _LEN.unpack_from(data, end - 4)
            if zlib.crc32(body) != crc:
                break
            (nlen,) = _U16.unpack_from(body, 0)
            if 2 + nlen + 12 > len(body):
                break
            try:
                name = body[2:2 + nlen].decode("utf-8")
            except UnicodeDecodeError:
                break
            version, blen = _VER_BLOB.unpack_from(body, 2 + nlen)
            boff = 2 + nlen + 12
            if boff + blen != len(body):
                break
            prev = self.index.get(name)
            if prev is None or version >= prev[0]:
                self.index[name] = (version, pos + 4 + boff, blen)
            pos = end
        if pos < size:
            self.torn_bytes = size - pos
            log.warning("%s: discarding %d bytes of torn tail", self.path, self.torn_bytes)
            os.ftruncate(self.fd, pos)
        self.end = pos

    def append(self, name: str, version: int, blob: bytes) -> None:
        rec = encode_record(name, version, blob)
        try:
            os.write(self.fd, rec)
            if self.fsync:
                os.fsync(self.fd)
        except OSError as exc:
            raise StoreIO(f"write to {self.path} failed: {exc}") from exc
        boff = self.end + 4 + 2 + len(name.encode("utf-8")) + 12
        self.index[name] = (version, boff, len(blob))
        self.end += len(rec)

    def read(self, name: str) -> tuple[bytes, int]:
        version, off, length = self.index[name]
        try:
            return os.pread(self.fd, length, off), version
        except OSError as exc:
            raise StoreIO(f"read from {self.path} failed: {exc}") from exc

    def close(self) -> None:
        os.close(self.fd)


class StateStore:
    """Latest-version-wins snapshot store, one log file per shard."""

    def __init__(self, path, shards: int = 1, fsync: bool = True):
        if shards < 1:
            raise ValueError("shards must be >= 1")
        self.path = Path(path)
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreIO(f"cannot create {self.path}: {exc}") from exc
        self._shards = [_Shard(self.path / f"shard-{i}.log", fsync) for i in range(shards)]
        self._lock = threading.Lock()
        self.writes = 0

    def _shard(self, name: str) -> _Shard:
        return self._shards[zlib.crc32(name.encode("utf-8")) % len(self._shards)]

    def persist_state(self, agent, blob: bytes, version: int, allow_equal: bool = False) -> None:
        """Append and flush. ``allow_equal`` accepts rewriting the stored version."""
        name = _key(agent)
        with self._lock:
            shard = self._shard(name)
            cur = shard.index.get(name)
            if cur is not None and (version < cur[0] or (version == cur[0] and not allow_equal)):
                raise StaleVersion(name, cur[0], version)
            shard.append(name, version, blob)
            self.writes += 1

    def fetch_state(self, agent) -> tuple[bytes, int]:
        name = _key(agent)
        with self._lock:
            shard = self._shard(name)
            if name not in shard.index:
                raise UnknownAgent(f"no stored state for {name!r}")
            return shard.read(name)

    def version_of(self, agent) -> int | None:
        name = _key(agent)
        entry = self._shard(name).index.get(name)
        return None if entry is None else entry[0]

    def names(self) -> list[str]:
        return sorted(n for s in self._shards for n in s.index)

    def disk_bytes(self) -> int:
        return sum(s.end for s in self._shards)

    def close(self) -> None:
        for s in self._shards:
            s.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def persist_state(store: StateStore, agent, blob: bytes, version: int) -> None:
    store.persist_state(agent, blob, version)


def fetch_state(store: StateStore, agent) -> tuple[bytes, int]:
    return store.fetch_state(agent)


class StoreStrategy:
    """Persistence through a :class:`StateStore` on the update path.

    ``io_delay`` adds simulated seconds after each flush; it only matters on
    the simulated clock, where a real fsync takes no time.
    """

    name = "store"

    def __init__(self, store: StateStore, io_delay: float = 0.0):
        self.store = store
        self.io_delay = io_delay

    def _after(self, agent, done) -> None:
        if self.io_delay > 0:
            agent.call_later(self.io_delay, done)
        else:
            done()

    def on_register(self, monitor, aid: AgentId, snapshot: LocalState, done) -> None:
        # a recreated agent registers at the version it was fetched at
        self.store.persist_state(aid, encode_snapshot(snapshot), snapshot.version, allow_equal=True)
        self._after(monitor, done)

    def after_join(self, worker) -> None:
        worker.send_ready()

    def on_update(self, worker, update, done) -> None:
        self.store.persist_state(worker.id, encode_snapshot(worker.state), worker.state.version)
        self._after(worker, done)

    def recover(self, monitor, event, done) -> None:
        try:
            blob, _ = self.store.fetch_state(event.subject)
            done(decode_snapshot(blob))
        except (UnknownAgent, StoreIO) as exc:
            done(exc)

    def recover_clone(self, monitor, event, done) -> None:
        done(ValueError("the store strategy has no clones"))


def recreate_from_store(main_agent, event, timeout: float | None = None) -> AgentId:
    return _await_recovery(main_agent, event, timeout)
