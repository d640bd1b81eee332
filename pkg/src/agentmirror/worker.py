"""Worker agents: application behavior plus registration and persistence hooks."""

from __future__ import annotations

import collections
import logging
import struct

from .agent import Agent, Behavior
from .errors import MalformedBlob
from .ids import AgentId
from .mirror import CLONE_DOWN, CloneBinding, SyncChannel
from .state import (
    KIND_SNAPSHOT,
    EnvState,
    LocalState,
    StateUpdate,
    apply_update,
    blob_kind,
    decode_snapshot,
    decode_update,
    encode_snapshot,
    encode_update,
    state_with,
)
from .transport import Envelope, MessageType
from . import wire

log = logging.getLogger(__name__)

_ENV_REPLY = struct.Struct(">BQ")


def _noop():
    pass


class WorkerAgent(Agent):
    """Runs a :class:`Behavior` once registered.

    Registration: JOIN (with a snapshot) to the platform monitor, then the
    strategy's own step (a clone under mirroring), then READY. The behavior
    starts when READY is acknowledged.
    """

    role = "worker"

    def __init__(self, platform, aid: AgentId, behavior: Behavior, state: LocalState,
                 monitor: AgentId, strategy, binding: CloneBinding | None = None,
                 recreated: bool = False):
        super().__init__(platform, aid)
        self.behavior = behavior
        self.state = state
        self.env = EnvState()
        self.monitor = monitor
        self.strategy = strategy
        self.remote_monitor: AgentId | None = None
        self.sync = SyncChannel(self, binding)
        self.recreated = recreated
        self.joined = False
        self.ready = False
        self.error: Exception | None = None
        self._env_waiters: collections.deque = collections.deque()

    # registration

    def start(self) -> None:
        self.platform.emit("register_sent", aid=self.id, recreated=self.recreated)
        self._send_join()

    def _send_join(self) -> None:
        if self.joined:
            return
        self.try_send(MessageType.REGISTER, self.monitor,
                      wire.register(wire.Phase.JOIN, encode_snapshot(self.state)))
        # only repeats while the monitor is down
        self.call_later(self.platform.config.monitor.failure_timeout, self._send_join)

    def send_ready(self) -> None:
        if self.ready:
            return
        body = wire.pack_binding(self.sync.info())
        self.try_send(MessageType.REGISTER, self.monitor, wire.register(wire.Phase.READY, body))
        self.call_later(self.platform.config.monitor.failure_timeout, self.send_ready)

    def on_binding_ready(self) -> None:
        self.send_ready()

    def fail(self, exc: Exception) -> None:
        self.error = exc

    def _on_register_ack(self, env: Envelope) -> None:
        phase, body = wire.split_phase(env.payload)
        if phase is wire.Phase.JOIN:
            if self.joined:
                return
            self.joined = True
            remote, pos = wire.read_aid(body, 0)
            self.remote_monitor = remote
            self.env = decode_snapshot(body[pos:], EnvState)
            self.platform.emit("registered", aid=self.id, recreated=self.recreated)
            self.strategy.after_join(self)
        elif phase is wire.Phase.READY:
            if self.ready:
                return
            self.ready = True
            self.platform.emit("ready", aid=self.id, recreated=self.recreated)
            self.behavior.on_start(self)

    # state

    def update_state(self, changes, then=None) -> StateUpdate | None:
        """Apply ``changes`` as the next version and hand it to the strategy.

        ``then`` runs once the strategy considers the update done (for the
        store that is after the flush). No-op changes produce no version.
        """
        new, update = state_with(self.state, changes)
        if update is None:
            (then or _noop)()
            return None
        self.state = new
        self.strategy.on_update(self, update, then or _noop)
        return update

    def apply_update(self, update: StateUpdate, then=None) -> None:
        self.state = apply_update(self.state, update)
        self.strategy.on_update(self, update, then or _noop)

    # environment

    def request_env_update(self, update: StateUpdate, mode: wire.EnvMode = wire.EnvMode.APPEND,
                           callback=None) -> None:
        """Ask the primary monitor to apply ``update`` to the environment.

        ``callback(ok, version)`` gets the monitor's verdict.
        """
        self._env_waiters.append(callback)
        payload = bytes([mode]) + encode_update(update)
        self.try_send(MessageType.SYNC_UPDATE, self.platform.primary_monitor_id, payload)

    def _on_env(self, env: Envelope) -> None:
        try:
            if blob_kind(env.payload) == KIND_SNAPSHOT:
                snap = decode_snapshot(env.payload, EnvState)
                if snap.version >= self.env.version:
                    self.env = snap
                return
            update = decode_update(env.payload)
        except MalformedBlob as exc:
            log.warning("%s: bad environment update: %s", self.id, exc)
            return
        if update.from_version == self.env.version:
            self.env = apply_update(self.env, update)

    # dispatch

    def handle(self, env: Envelope) -> None:
        t = env.msg_type
        from_monitor = self.platform.is_monitor(env.sender)
        if t is MessageType.REGISTER_ACK:
            self._on_register_ack(env)
        elif t is MessageType.CLONE_ACK:
            self.sync.on_clone_ack(env)
        elif t is MessageType.SYNC_ACK:
            if from_monitor:
                ok, version = _ENV_REPLY.unpack(env.payload)
                cb = self._env_waiters.popleft() if self._env_waiters else None
                if cb is not None:
                    cb(bool(ok), version)
            else:
                self.sync.on_sync_ack(env)
        elif t is MessageType.SYNC_UPDATE and from_monitor:
            self._on_env(env)
        elif t is MessageType.RECOVER_REQUEST:
            b = self.sync.binding
            if b is not None and len(env.payload) == 16 and b.conversation != env.payload:
                # our clone is being recreated under a new conversation
                b.conversation = env.payload
                b.status = CLONE_DOWN
            self.try_send(MessageType.RECOVER_REPLY, env.sender, encode_snapshot(self.state), env.conversation)
        elif t is MessageType.REGISTER and from_monitor:
            phase, _ = wire.split_phase(env.payload)
            if phase is wire.Phase.REJOIN_REQUEST:
                body = wire.pack_binding(self.sync.info()) + wire.pack_blob(encode_snapshot(self.env))
                self.try_send(MessageType.REGISTER, env.sender, wire.register(wire.Phase.REJOIN, body))
        else:
            self.behavior.on_message(self, env)


def env_reply(ok: bool, version: int) -> bytes:
    return _ENV_REPLY.pack(1 if ok else 0, version)
