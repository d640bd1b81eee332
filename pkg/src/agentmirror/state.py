"""Versioned agent state and its canonical binary encoding.

State is a flat map from UTF-8 keys to primitive values (int, float, str,
bytes, bool) plus a version counter. Values are compared by tag and exact
bit pattern, so ``1``, ``1.0`` and ``True`` are three different values and
``-0.0`` differs from ``0.0``.

Blob layout (all integers big-endian, no padding)::

    "MKS1" | kind:u8 (0 snapshot, 1 update)
    snapshot: version:u64 | count:u32 | entry*
    update:   from:u64 | to:u64 | count:u32 | op*
    entry/op: keylen:u16 | key | tag:u8 | payload
    tag 0 int   -> i64
    tag 1 float -> f64 (NaN rejected)
    tag 2 str   -> len:u32 | utf-8
    tag 3 bytes -> len:u32 | raw
    tag 4 bool  -> u8 (0 or 1)
    tag 5 DELETE (updates only, no payload)
"""

from __future__ import annotations

import math
import struct
from collections.abc import Iterable, Iterator, Mapping
from typing import Union

from .errors import InvalidValue, MalformedBlob, NoChange, VersionMismatch

Value = Union[int, float, str, bytes, bool]

MAGIC = b"MKS1"
KIND_SNAPSHOT = 0
KIND_UPDATE = 1

TAG_INT, TAG_FLOAT, TAG_STR, TAG_BYTES, TAG_BOOL, TAG_DELETE = range(6)

U64_MAX = (1 << 64) - 1
I64_MIN, I64_MAX = -(1 << 63), (1 << 63) - 1
_U32_MAX = (1 << 32) - 1
_U16_MAX = (1 << 16) - 1

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")


class _Delete:
    __slots__ = ()

    def __repr__(self):
        return "DELETE"

    def __reduce__(self):
        return "DELETE"


DELETE = _Delete()


def value_tag(value) -> int:
    # bool first: it is a subclass of int
    if isinstance(value, bool):
        return TAG_BOOL
    if isinstance(value, int):
        return TAG_INT
    if isinstance(value, float):
        return TAG_FLOAT
    if isinstance(value, str):
        return TAG_STR
    if isinstance(value, bytes):
        return TAG_BYTES
    raise InvalidValue(f"unsupported value type {type(value).__name__}")


def check_value(value) -> Value:
    """Validate a value and normalise bytearray/memoryview to bytes."""
    if isinstance(value, (bytearray, memoryview)):
        value = bytes(value)
    tag = value_tag(value)
    if tag == TAG_INT and not I64_MIN <= value <= I64_MAX:
        raise InvalidValue(f"integer {value} does not fit in 64 bits")
    elif tag == TAG_FLOAT and math.isnan(value):
        raise InvalidValue("NaN is not a valid state value")
    elif tag == TAG_STR:
        try:
            n = len(value.encode("utf-8"))
        except UnicodeEncodeError as exc:
            raise InvalidValue("string is not valid UTF-8") from exc
        if n > _U32_MAX:
            raise InvalidValue("string too long")
    elif tag == TAG_BYTES and len(value) > _U32_MAX:
        raise InvalidValue("byte value too long")
    return value


def _check_key(key) -> bytes:
    if not isinstance(key, str):
        raise InvalidValue(f"keys must be str, got {type(key).__name__}")
    try:
        raw = key.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise InvalidValue(f"key {key!r} is not valid UTF-8") from exc
    if len(raw) > _U16_MAX:
        raise InvalidValue("key longer than 65535 bytes")
    return raw


def _check_version(version) -> int:
    if isinstance(version, bool) or not isinstance(version, int) or not 0 <= version <= U64_MAX:
        raise InvalidValue(f"version must be an unsigned 64-bit integer, got {version!r}")
    return version


def value_identity(value: Value):
    """Key under which two values compare equal iff tag and bits match."""
    tag = value_tag(value)
    if tag == TAG_FLOAT:
        return tag, _F64.pack(value)
    return tag, value


def values_equal(a: Value, b: Value) -> bool:
    return value_identity(a) == value_identity(b)


class LocalState(Mapping):
    """Immutable versioned key/value state owned by one agent.

    Iteration order is lexicographic by UTF-8 key bytes, which is also the
    encoding order.
    """

    __slots__ = ("_entries", "version", "_hash")

    def __init__(self, entries: Mapping[str, Value] | Iterable[tuple[str, Value]] = (), version: int = 0):
        items = entries.items() if isinstance(entries, Mapping) else entries
        checked = {}
        for key, value in items:
            raw = _check_key(key)
            if key in checked:
                raise InvalidValue(f"duplicate key {key!r}")
            checked[key] = (raw, check_value(value))
        ordered = sorted(checked.items(), key=lambda kv: kv[1][0])
        self._entries = {k: v for k, (_, v) in ordered}
        self.version = _check_version(version)
        self._hash = None

    @classmethod
    def _trusted(cls, entries: dict, version: int):
        # entries already validated and sorted
        obj = cls.__new__(cls)
        obj._entries = entries
        obj.version = version
        obj._hash = None
        return obj

    def __getitem__(self, key: str) -> Value:
        return self._entries[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def _identity(self):
        return self.version, tuple((k, value_identity(v)) for k, v in self._entries.items())

    def __eq__(self, other):
        if not isinstance(other, LocalState):
            return NotImplemented
        if self.version != other.version or len(self) != len(other):
            return False
        return self._identity() == other._identity()

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(self._identity())
        return self._hash

    def __repr__(self):
        return f"{type(self).__name__}({self._entries!r}, version={self.version})"

    def to_dict(self) -> dict[str, Value]:
        return dict(self._entries)


class EnvState(LocalState):
    """Platform-wide state; only a monitoring agent may advance it."""

    __slots__ = ()


class StateUpdate:
    """One versioned change: a non-empty list of SET/DELETE operations."""

    __slots__ = ("ops", "from_version", "to_version")

    def __init__(self, ops: Iterable[tuple[str, object]] | Mapping[str, object], from_version: int,
                 to_version: int | None = None):
        items = ops.items() if isinstance(ops, Mapping) else ops
        checked = []
        seen = set()
        for key, value in items:
            _check_key(key)
            if key in seen:
                raise InvalidValue(f"duplicate key {key!r} in one update")
            seen.add(key)
            checked.append((key, value if value is DELETE else check_value(value)))
        if not checked:
            raise InvalidValue("an update must carry at least one operation")
        _check_version(from_version)
        if to_version is None:
            to_version = from_version + 1
        if to_version != from_version + 1 or to_version > U64_MAX:
            raise InvalidValue(f"to_version must be from_version + 1, got {from_version}->{to_version}")
        self.ops = tuple(checked)
        self.from_version = from_version
        self.to_version = to_version

    def _identity(self):
        return (
            self.from_version,
            tuple((k, None if v is DELETE else value_identity(v)) for k, v in self.ops),
        )

    def __eq__(self, other):
        if not isinstance(other, StateUpdate):
            return NotImplemented
        return self._identity() == other._identity()

    def __hash__(self):
        return hash(self._identity())

    def __repr__(self):
        return f"StateUpdate({list(self.ops)!r}, {self.from_version}->{self.to_version})"


# encoding

def _encode_value(out: list, value) -> None:
    if value is DELETE:
        out.append(b"\x05")
        return
    tag = value_tag(value)
    out.append(_U8.pack(tag))
    if tag == TAG_INT:
        out.append(_I64.pack(value))
    elif tag == TAG_FLOAT:
        out.append(_F64.pack(value))
    elif tag == TAG_STR:
        raw = value.encode("utf-8")
        out.append(_U32.pack(len(raw)))
        out.append(raw)
    elif tag == TAG_BYTES:
        out.append(_U32.pack(len(value)))
        out.append(value)
    else:
        out.append(b"\x01" if value else b"\x00")


def _encode_items(out: list, items) -> None:
    for key, value in items:
        raw = key.encode("utf-8")
        out.append(_U16.pack(len(raw)))
        out.append(raw)
        _encode_value(out, value)


def encode_snapshot(state: LocalState) -> bytes:
    out = [MAGIC, b"\x00", _U64.pack(state.version), _U32.pack(len(state))]
    _encode_items(out, state._entries.items())
    return b"".join(out)


def encode_update(update: StateUpdate) -> bytes:
    out = [MAGIC, b"\x01", _U64.pack(update.from_version), _U64.pack(update.to_version),
           _U32.pack(len(update.ops))]
    _encode_items(out, update.ops)
    return b"".join(out)


# decoding

class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise MalformedBlob(f"truncated {what}", self.pos)
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, st: struct.Struct, what: str):
        if self.pos + st.size > len(self.buf):
            raise MalformedBlob(f"truncated {what}", self.pos)
        (v,) = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return v


def _read_header(r: _Reader, kind: int) -> None:
    if r.pos + 4 > len(r.buf) or r.buf[r.pos:r.pos + 4] != MAGIC:
        raise MalformedBlob("bad magic", r.pos)
    r.pos += 4
    start = r.pos
    got = r.unpack(_U8, "kind")
    if got != kind:
        raise MalformedBlob(f"expected kind {kind}, found {got}", start)


def _read_key(r: _Reader) -> tuple[str, bytes]:
    n = r.unpack(_U16, "key length")
    start = r.pos
    raw = r.take(n, "key")
    try:
        return raw.decode("utf-8"), raw
    except UnicodeDecodeError:
        raise MalformedBlob("key is not valid UTF-8", start) from None


def _read_value(r: _Reader, allow_delete: bool):
    start = r.pos
    tag = r.unpack(_U8, "value tag")
    if tag == TAG_INT:
        return r.unpack(_I64, "int payload")
    if tag == TAG_FLOAT:
        at = r.pos
        v = r.unpack(_F64, "float payload")
        if math.isnan(v):
            raise MalformedBlob("NaN float", at)
        return v
    if tag == TAG_STR:
        n = r.unpack(_U32, "string length")
        at = r.pos
        raw = r.take(n, "string payload")
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedBlob("string is not valid UTF-8", at) from None
    if tag == TAG_BYTES:
        n = r.unpack(_U32, "bytes length")
        return r.take(n, "bytes payload")
    if tag == TAG_BOOL:
        at = r.pos
        b = r.unpack(_U8, "bool payload")
        if b > 1:
            raise MalformedBlob("bool payload must be 0 or 1", at)
        return b == 1
    if tag == TAG_DELETE and allow_delete:
        return DELETE
    raise MalformedBlob(f"unknown value tag {tag}", start)


def _finish(r: _Reader) -> None:
    if r.pos != len(r.buf):
        raise MalformedBlob("trailing bytes", r.pos)


def decode_snapshot(blob: bytes, cls: type[LocalState] = LocalState) -> LocalState:
    """Inverse of :func:`encode_snapshot`; rejects anything non-canonical."""
    r = _Reader(bytes(blob))
    _read_header(r, KIND_SNAPSHOT)
    version = r.unpack(_U64, "version")
    count = r.unpack(_U32, "entry count")
    entries = {}
    prev = None
    for _ in range(count):
        start = r.pos
        key, raw = _read_key(r)
        if prev is not None and raw <= prev:
            raise MalformedBlob("duplicate key" if raw == prev else "keys out of canonical order", start)
        prev = raw
        entries[key] = _read_value(r, allow_delete=False)
    _finish(r)
    return cls._trusted(entries, version)


def decode_update(blob: bytes) -> StateUpdate:
    r = _Reader(bytes(blob))
    _read_header(r, KIND_UPDATE)
    frm = r.unpack(_U64, "from_version")
    at = r.pos
    to = r.unpack(_U64, "to_version")
    if frm == U64_MAX or to != frm + 1:
        raise MalformedBlob("to_version must equal from_version + 1", at)
    at = r.pos
    count = r.unpack(_U32, "op count")
    if count == 0:
        raise MalformedBlob("update with no operations", at)
    ops = []
    seen = set()
    for _ in range(count):
        start = r.pos
        key, _raw = _read_key(r)
        if key in seen:
            raise MalformedBlob("duplicate key", start)
        seen.add(key)
        ops.append((key, _read_value(r, allow_delete=True)))
    _finish(r)
    upd = StateUpdate.__new__(StateUpdate)
    upd.ops = tuple(ops)
    upd.from_version = frm
    upd.to_version = to
    return upd


def blob_kind(blob: bytes) -> int:
    """Return KIND_SNAPSHOT or KIND_UPDATE without decoding the body."""
    if len(blob) < 5 or blob[:4] != MAGIC:
        raise MalformedBlob("bad magic", 0)
    if blob[4] not in (KIND_SNAPSHOT, KIND_UPDATE):
        raise MalformedBlob(f"unknown kind {blob[4]}", 4)
    return blob[4]


# operations

def apply_update(state: LocalState, update: StateUpdate) -> LocalState:
    if update.from_version != state.version:
        raise VersionMismatch(state.version, update.from_version)
    entries = dict(state._entries)
    resort = False
    for key, value in update.ops:
        if value is DELETE:
            entries.pop(key, None)
        else:
            if key not in entries:
                resort = True
            entries[key] = value
    if resort:
        entries = dict(sorted(entries.items(), key=lambda kv: kv[0].encode("utf-8")))
    return type(state)._trusted(entries, update.to_version)


def diff_states(old: LocalState, new: LocalState) -> StateUpdate:
    """Smallest update taking ``old`` to ``new`` (sorted by key)."""
    if new.version != old.version + 1:
        raise VersionMismatch(old.version + 1, new.version)
    ops = []
    for key, value in new.items():
        if key not in old or not values_equal(old[key], value):
            ops.append((key, value))
    for key in old:
        if key not in new:
            ops.append((key, DELETE))
    if not ops:
        raise NoChange("states have identical entries")
    ops.sort(key=lambda kv: kv[0].encode("utf-8"))
    return StateUpdate(ops, old.version)


def state_with(state: LocalState, changes: Mapping[str, object]) -> tuple[LocalState, StateUpdate | None]:
    """Apply ``changes`` as the next version, skipping no-op assignments.

    Returns the new state and the update, or ``(state, None)`` when nothing
    would change.
    """
    ops = []
    for key, value in changes.items():
        if value is DELETE:
            if key in state:
                ops.append((key, DELETE))
        elif key not in state or not values_equal(state[key], value):
            ops.append((key, value))
    if not ops:
        return state, None
    update = StateUpdate(ops, state.version)
    return apply_update(state, update), update
