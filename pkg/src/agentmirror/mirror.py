"""Worker/clone mirroring.

A worker ships its initial snapshot to the remote monitor, which spawns a
clone holding that state. After that the worker applies each change locally
and streams it to the clone as a diff; the clone answers every SYNC_UPDATE
with its own version. Any reply that does not move the acknowledged version
forward while the worker is ahead means an update was lost, and the worker
repairs the gap with one full snapshot. A timer covers the case where the
lost message was the last one.

Durability is "at least the last acknowledged version": a change the worker
applied but the clone never acknowledged may be gone after a crash.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .agent import Agent
from .errors import (
    CloneExists,
    CloneUnreachable,
    MalformedBlob,
    NoBinding,
    WorkerUnreachable,
)
from .ids import AgentId
from .state import (
    KIND_SNAPSHOT,
    LocalState,
    StateUpdate,
    apply_update,
    blob_kind,
    decode_snapshot,
    decode_update,
    encode_snapshot,
    encode_update,
)
from .transport import Envelope, MessageType, new_conversation
from . import wire

log = logging.getLogger(__name__)

ACTIVE = "active"
WORKER_DOWN = "worker_down"
CLONE_DOWN = "clone_down"


def clone_name(worker: AgentId) -> str:
    return f"{worker.name}~{worker.platform.platform_name}"


@dataclass
class CloneBinding:
    worker: AgentId
    clone: AgentId
    conversation: bytes
    last_acked_version: int = 0
    status: str = ACTIVE

    def advance(self, version: int) -> bool:
        if version > self.last_acked_version:
            self.last_acked_version = version
            return True
        return False


@dataclass(frozen=True)
class FailureEvent:
    subject: AgentId
    role: str
    detected_at: float
    binding: CloneBinding | None
    incarnation: int = 0


class SyncChannel:
    """Worker side of one binding."""

    def __init__(self, worker, binding: CloneBinding | None = None):
        self.worker = worker
        self.binding = binding
        self.requesting: bytes | None = None  # conversation of an open clone request
        self.remote_monitor: AgentId | None = None
        self.resync_version: int | None = None
        self.updates_sent = 0
        self.snapshots_sent = 0
        self._progress = False
        self._timer = None

    @property
    def cfg(self):
        return self.worker.platform.config.monitor

    def request(self, remote_monitor: AgentId) -> None:
        """Send CLONE_REQUEST. Raises CloneExists or Disconnected."""
        if self.binding is not None and self.binding.status == ACTIVE:
            raise CloneExists(f"{self.worker.id} already mirrored by {self.binding.clone}")
        self.remote_monitor = remote_monitor
        if self.requesting is None:
            self.requesting = new_conversation(self.worker.platform.rng)
        self._send_request()
        self.worker.call_later(self.cfg.sync_timeout, self._retry_request, self.requesting)

    def _send_request(self) -> None:
        self.worker.send(MessageType.CLONE_REQUEST, self.remote_monitor,
                         encode_snapshot(self.worker.state), self.requesting)

    def _retry_request(self, conv: bytes) -> None:
        if self.requesting != conv:
            return
        self.worker.try_send(MessageType.CLONE_REQUEST, self.remote_monitor,
                             encode_snapshot(self.worker.state), conv)
        self.worker.call_later(self.cfg.sync_timeout, self._retry_request, conv)

    def on_clone_ack(self, env: Envelope) -> None:
        version = wire.unpack_u64(env.payload)
        if self.requesting is not None and env.conversation == self.requesting:
            self.binding = CloneBinding(self.worker.id, env.sender, env.conversation, version)
            self.requesting = None
            self.worker.on_binding_ready()
        elif self.binding is not None and env.conversation == self.binding.conversation:
            # a recreated clone announcing itself
            self.binding.clone = env.sender
            self.binding.status = ACTIVE
        else:
            return
        self._on_version(version)

    def on_sync_ack(self, env: Envelope) -> None:
        b = self.binding
        if b is None or env.conversation != b.conversation:
            return
        self._on_version(wire.unpack_u64(env.payload))

    def _on_version(self, version: int) -> None:
        b = self.binding
        current = self.worker.state.version
        if b.advance(version):
            self._progress = True
            if self.resync_version is not None and version >= self.resync_version:
                self.resync_version = None
        elif version < current and self.resync_version is None:
            self.resync()
        if b.last_acked_version < current:
            self._arm()

    def ship(self, update: StateUpdate) -> None:
        b = self.binding
        if b is None:
            if self.requesting is None:
                raise NoBinding(f"{self.worker.id} has no clone")
            return  # the clone request will carry a snapshot
        self.updates_sent += 1
        self.worker.try_send(MessageType.SYNC_UPDATE, b.clone, encode_update(update), b.conversation)
        self._arm()

    def resync(self) -> None:
        b = self.binding
        if b is None:
            raise NoBinding(f"{self.worker.id} has no clone")
        self.resync_version = self.worker.state.version
        self.snapshots_sent += 1
        self.worker.try_send(MessageType.SYNC_UPDATE, b.clone, encode_snapshot(self.worker.state), b.conversation)
        self._arm()

    def _arm(self) -> None:
        if self._timer is None:
            self._progress = False
            self._timer = self.worker.call_later(self.cfg.sync_timeout, self._tick)

    def _tick(self) -> None:
        self._timer = None
        b = self.binding
        if b is None or b.last_acked_version >= self.worker.state.version:
            return
        if not self._progress:
            self.resync()
        self._arm()

    def info(self) -> wire.BindingInfo | None:
        b = self.binding
        if b is None:
            return None
        return wire.BindingInfo(b.clone, b.conversation, b.last_acked_version)


class CloneAgent(Agent):
    """Holds a mirrored copy of one worker's state and nothing else."""

    role = "clone"

    def __init__(self, platform, aid: AgentId, worker: AgentId, conversation: bytes, state: LocalState):
        super().__init__(platform, aid)
        self.worker = worker
        self.conversation = conversation
        self.state = state
        self.updates_applied = 0
        self.snapshots_applied = 0

    def announce(self) -> None:
        self.try_send(MessageType.CLONE_ACK, self.worker, wire.pack_u64(self.state.version), self.conversation)

    def handle(self, env: Envelope) -> None:
        t = env.msg_type
        if t is MessageType.SYNC_UPDATE and env.sender == self.worker:
            if env.conversation == self.conversation:
                self._on_sync(env)
        elif t is MessageType.CLONE_REQUEST and env.sender == self.worker:
            self.conversation = env.conversation
            self._take_snapshot(env.payload)
            self.announce()
        elif t is MessageType.RECOVER_REQUEST:
            if len(env.payload) == 16:
                # the worker is being recreated: only its next incarnation may sync
                self.conversation = env.payload
            self.try_send(MessageType.RECOVER_REPLY, env.sender, encode_snapshot(self.state), env.conversation)
        elif t is MessageType.REGISTER and env.payload[:1] == bytes([wire.Phase.REJOIN_REQUEST]):
            info = wire.BindingInfo(self.worker, self.conversation, self.state.version)
            body = info.pack() + wire.pack_blob(b"")
            self.try_send(MessageType.REGISTER, env.sender, wire.register(wire.Phase.REJOIN, body))
        else:
            super().handle(env)

    def _take_snapshot(self, blob: bytes) -> None:
        snap = decode_snapshot(blob)
        if snap.version >= self.state.version:
            self.state = snap
            self.snapshots_applied += 1

    def _on_sync(self, env: Envelope) -> None:
        try:
            if blob_kind(env.payload) == KIND_SNAPSHOT:
                self._take_snapshot(env.payload)
            else:
                update = decode_update(env.payload)
                if update.from_version == self.state.version:
                    self.state = apply_update(self.state, update)
                    self.updates_applied += 1
                # older updates are stale, newer ones reveal a gap: both just
                # report the current version
        except MalformedBlob as exc:
            log.warning("%s: dropping malformed sync payload: %s", self.id, exc)
            return
        self.try_send(MessageType.SYNC_ACK, self.worker, wire.pack_u64(self.state.version), self.conversation)


class RecoverFromPeer:
    """Ask ``target`` for its snapshot, retrying a bounded number of times."""

    def __init__(self, monitor, target: AgentId, conversation: bytes, done, error_cls,
                 payload: bytes = b""):
        self.monitor = monitor
        self.target = target
        self.conversation = conversation
        self.payload = payload
        self.done = done
        self.error_cls = error_cls
        self.attempts = 0
        self.finished = False

    def start(self) -> None:
        self.monitor.tasks[self.target] = self
        self._attempt()

    def _attempt(self) -> None:
        if self.finished:
            return
        cfg = self.monitor.cfg
        if self.attempts >= cfg.max_attempts:
            self._finish(self.error_cls(f"{self.target} did not answer {self.attempts} recovery requests"))
            return
        self.attempts += 1
        self.monitor.try_send(MessageType.RECOVER_REQUEST, self.target, self.payload, self.conversation)
        self.monitor.call_later(cfg.retry_interval, self._attempt)

    def on_reply(self, env: Envelope) -> None:
        if self.finished:
            return
        try:
            state = decode_snapshot(env.payload)
        except MalformedBlob as exc:
            log.warning("bad recovery snapshot from %s: %s", env.sender, exc)
            return
        self._finish(state)

    def _finish(self, result) -> None:
        self.finished = True
        if self.monitor.tasks.get(self.target) is self:
            del self.monitor.tasks[self.target]
        self.done(result)


class MirrorStrategy:
    """Persistence by an in-memory clone on the remote platform."""

    name = "mirror"

    def on_register(self, monitor, aid: AgentId, snapshot: LocalState, done) -> None:
        done()

    def after_join(self, worker) -> None:
        if worker.sync.binding is not None:
            worker.send_ready()
            return
        if worker.remote_monitor is None:
            worker.fail(NoBinding("no remote monitor known; exchange AIDs first"))
            return
        try:
            worker.sync.request(worker.remote_monitor)
        except Exception as exc:  # Disconnected: surfaced to whoever waits on the worker
            worker.fail(exc)

    def on_update(self, worker, update: StateUpdate, done) -> None:
        worker.sync.ship(update)
        done()

    def recover(self, monitor, event: FailureEvent, done) -> None:
        b = event.binding
        if b is None:
            done(CloneUnreachable(f"{event.subject} had no clone"))
            return
        conv = new_conversation(monitor.platform.rng)
        fresh = CloneBinding(b.worker, b.clone, conv, 0)

        def finish(result):
            if isinstance(result, LocalState):
                fresh.last_acked_version = result.version
                done(result, fresh)
            else:
                done(result)

        RecoverFromPeer(monitor, b.clone, conv, finish, CloneUnreachable, payload=conv).start()

    def recover_clone(self, monitor, event: FailureEvent, done) -> None:
        b = event.binding
        conv = new_conversation(monitor.platform.rng)

        def finish(result):
            if isinstance(result, LocalState):
                done(result, CloneBinding(b.worker, b.clone, conv, result.version))
            else:
                done(result)

        # the worker adopts the new conversation, so only the next clone hears it
        RecoverFromPeer(monitor, b.worker, conv, finish, WorkerUnreachable, payload=conv).start()


# blocking helpers: each drives the loop until the protocol step completes

DEFAULT_WAIT = 30.0


def _drive(loop, predicate, timeout: float | None, what: str) -> None:
    if not loop.run_until(predicate, timeout=DEFAULT_WAIT if timeout is None else timeout):
        raise TimeoutError(f"timed out waiting for {what}")


def request_clone(worker, remote_monitor: AgentId, timeout: float | None = None) -> CloneBinding:
    worker.error = None
    worker.sync.request(remote_monitor)
    _drive(worker.loop, lambda: worker.sync.binding is not None or worker.error is not None,
           timeout, f"clone of {worker.id}")
    if worker.error is not None:
        raise worker.error
    return worker.sync.binding


def sync_update(worker, update: StateUpdate) -> None:
    """Apply ``update`` on the worker, then stream it to the clone."""
    if worker.sync.binding is None:
        raise NoBinding(f"{worker.id} has no clone")
    worker.apply_update(update)


def resync(worker, timeout: float | None = None) -> None:
    worker.sync.resync()
    target = worker.state.version
    _drive(worker.loop, lambda: worker.sync.binding.last_acked_version >= target, timeout,
           f"resync of {worker.id}")


class FailureStream(list):
    """Collects FailureEvents emitted by one monitor as the loop runs."""

    def __init__(self, monitor):
        super().__init__()
        self.monitor_id = monitor.id
        monitor.platform.subscribe(self._observe)

    def _observe(self, event) -> None:
        if event.kind == "failure_detected" and event.data["monitor"] == self.monitor_id:
            self.append(event.data["event"])


def detect_failure(monitor, cfg=None) -> FailureStream:
    if cfg is not None:
        monitor.cfg = cfg
    return FailureStream(monitor)


def _await_recovery(monitor, event: FailureEvent, timeout: float | None):
    key = (event.subject, event.incarnation)
    if key not in monitor.executor.outcomes and key not in monitor.executor.started:
        monitor.executor.submit(event)
    platform = monitor.platform

    def settled():
        out = monitor.executor.outcomes.get(key)
        if isinstance(out, Exception):
            return True
        rec = platform.registry.get(event.subject)
        return out is not None and rec is not None and rec.status == "running"

    _drive(monitor.loop, settled, timeout, f"recovery of {event.subject}")
    out = monitor.executor.outcomes[key]
    if isinstance(out, Exception):
        raise out
    return out


def recreate_worker(local_monitor, event: FailureEvent, timeout: float | None = None) -> AgentId:
    if event.role != "worker":
        raise ValueError("recreate_worker needs a worker failure")
    return _await_recovery(local_monitor, event, timeout)


def recreate_clone(remote_monitor, event: FailureEvent, timeout: float | None = None) -> AgentId:
    if event.role != "clone":
        raise ValueError("recreate_clone needs a clone failure")
    return _await_recovery(remote_monitor, event, timeout)


def handover(monitor, recreated: AgentId) -> int:
    """Forward what was buffered for ``recreated`` during its outage. Returns the count."""
    return monitor.handover(recreated)

