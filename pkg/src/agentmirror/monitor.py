"""Monitoring agents: supervision, recovery and the environment state."""

from __future__ import annotations

import collections
import dataclasses
import logging
import zlib

from .agent import Agent
from .errors import MalformedBlob, VersionMismatch
from .ids import AgentId
from .mirror import ACTIVE, CLONE_DOWN, WORKER_DOWN, CloneBinding, FailureEvent, clone_name
from .state import EnvState, LocalState, StateUpdate, apply_update, decode_snapshot, decode_update, encode_snapshot, encode_update
from .transport import Envelope, MessageType
from .worker import env_reply
from . import wire

log = logging.getLogger(__name__)

APP_TYPES = frozenset({MessageType.BID_CALL, MessageType.BID, MessageType.AUCTION_RESULT})


class _Watch:
    __slots__ = ("role", "incarnation", "last_seen")

    def __init__(self, role: str, incarnation: int, last_seen: float):
        self.role = role
        self.incarnation = incarnation
        self.last_seen = last_seen


class OutageBuffer:
    """Envelopes held for a dead worker. Full buffer drops the oldest."""

    def __init__(self, capacity: int):
        self.items: collections.deque[Envelope] = collections.deque(maxlen=capacity)
        self.dropped = 0

    def append(self, env: Envelope) -> None:
        if len(self.items) == self.items.maxlen:
            self.dropped += 1
        self.items.append(env)

    def __len__(self) -> int:
        return len(self.items)


class RecoveryExecutor:
    """Runs recoveries for one monitor, at most one at a time per agent.

    ``outcomes`` maps (subject, incarnation) to the recreated AgentId or the
    exception that ended the attempt.
    """

    def __init__(self, monitor):
        self.monitor = monitor
        self.started: set[tuple[AgentId, int]] = set()
        self.outcomes: dict[tuple[AgentId, int], object] = {}
        self._busy: set[AgentId] = set()
        self._queued: dict[AgentId, collections.deque] = collections.defaultdict(collections.deque)

    def submit(self, event: FailureEvent) -> None:
        key = (event.subject, event.incarnation)
        if key in self.started:
            return
        self.started.add(key)
        if event.subject in self._busy:
            self._queued[event.subject].append(event)
        else:
            self._run(event)

    def busy(self, aid: AgentId) -> bool:
        return aid in self._busy

    def _run(self, event: FailureEvent) -> None:
        self._busy.add(event.subject)
        strategy = self.monitor.platform.strategy
        if event.role == "worker":
            strategy.recover(self.monitor, event, lambda result, binding=None: self._done(event, result, binding))
        else:
            strategy.recover_clone(self.monitor, event, lambda result, binding=None: self._done(event, result, binding))

    def _done(self, event: FailureEvent, result, binding) -> None:
        key = (event.subject, event.incarnation)
        platform = self.monitor.platform
        if isinstance(result, LocalState):
            if event.role == "worker":
                aid = platform.respawn_worker(event.subject, result, binding or event.binding)
            else:
                b = binding or event.binding
                aid = platform.spawn_clone(event.subject, b.worker, b.conversation, result, self.monitor)
            self.outcomes[key] = aid
        else:
            self.outcomes[key] = result
            log.warning("recovery of %s failed: %s", event.subject, result)
            platform.emit("recovery_failed", aid=event.subject, role=event.role, error=result)
        self._busy.discard(event.subject)
        queued = self._queued.get(event.subject)
        if queued:
            self._run(queued.popleft())


class MonitorAgent(Agent):
    role = "monitor"

    def __init__(self, platform, aid: AgentId, shard: int, cfg):
        super().__init__(platform, aid)
        self.shard = shard
        self.cfg = cfg
        self.env_state = EnvState()
        self.supervised: dict[AgentId, _Watch] = {}
        self.buffers: dict[AgentId, OutageBuffer] = {}
        self.tasks: dict = {}
        self.executor = RecoveryExecutor(self)
        self.failures: list[FailureEvent] = []
        self.auto_recover = True
        self.extensions: dict[MessageType, object] = {}
        self.rebuilding: set[AgentId] | None = None

    @property
    def primary(self) -> bool:
        return self.shard == 0

    def peer_for(self, name: str) -> AgentId | None:
        peers = self.platform.peer_monitors
        if not peers:
            return None
        return peers[zlib.crc32(name.encode("utf-8")) % len(peers)]

    def env_view(self) -> EnvState:
        primary = self.platform.agents.get(self.platform.primary_monitor_id)
        if primary is not None and primary.alive:
            return primary.env_state
        return self.env_state

    # heartbeats

    def supervise(self, aid: AgentId, role: str, incarnation: int) -> None:
        w = self.supervised.get(aid)
        if w is not None and w.incarnation == incarnation:
            w.last_seen = self.now()
            return
        w = _Watch(role, incarnation, self.now())
        self.supervised[aid] = w
        # spread pings over the interval so large fleets don't ping in bursts
        self.call_later(self.platform.rng.random() * self.cfg.heartbeat_interval, self._tick, aid, w)

    def _tick(self, aid: AgentId, w: _Watch) -> None:
        if self.supervised.get(aid) is not w:
            return
        if self.now() - w.last_seen >= self.cfg.failure_timeout - 1e-9:
            self._failed(aid, w.incarnation)
            return
        self.try_send(MessageType.HEARTBEAT, aid, wire.PING)
        self.call_later(self.cfg.heartbeat_interval, self._tick, aid, w)

    def _failed(self, aid: AgentId, incarnation: int) -> None:
        self.supervised.pop(aid, None)
        rec = self.platform.registry.get(aid)
        if rec is None or rec.incarnation != incarnation:
            return
        # fence first: a slow agent declared dead must not keep running
        self.platform.fence(aid)
        binding = None
        if rec.binding is not None:
            rec.binding.status = WORKER_DOWN if rec.role == "worker" else CLONE_DOWN
            binding = dataclasses.replace(rec.binding)
        event = FailureEvent(aid, rec.role, self.now(), binding, incarnation)
        self.failures.append(event)
        if rec.role == "worker":
            self.open_buffer(aid)
        self.platform.emit("failure_detected", aid=aid, monitor=self.id, event=event)
        if self.auto_recover:
            self.executor.submit(event)

    # message handling

    def handle(self, env: Envelope) -> None:
        t = env.msg_type
        if t is MessageType.HEARTBEAT:
            w = self.supervised.get(env.sender)
            if w is not None:
                w.last_seen = self.now()
        elif t is MessageType.REGISTER:
            self._on_register(env)
        elif t is MessageType.CLONE_REQUEST:
            self._on_clone_request(env)
        elif t is MessageType.RECOVER_REPLY:
            task = self.tasks.get(env.sender)
            if task is not None and env.conversation == task.conversation:
                task.on_reply(env)
        elif t is MessageType.AID_EXCHANGE:
            self._on_aid_exchange(env)
        elif t is MessageType.SYNC_UPDATE:
            self._on_env_request(env)
        elif t in self.extensions:
            self.extensions[t](env)
        else:
            super().handle(env)

    def _on_register(self, env: Envelope) -> None:
        phase, body = wire.split_phase(env.payload)
        rec = self.platform.registry.get(env.sender)
        if rec is None or rec.agent is None or not rec.agent.alive:
            return
        if phase is wire.Phase.JOIN:
            snapshot = decode_snapshot(body)
            rec.supervisor = self.id
            self.supervise(env.sender, rec.role, rec.incarnation)
            sender, conv = env.sender, env.conversation

            def ack():
                payload = wire.register(wire.Phase.JOIN, wire.pack_aid(self.peer_for(sender.name))
                                        + encode_snapshot(self.env_view()))
                self.try_send(MessageType.REGISTER_ACK, sender, payload, conv)

            self.platform.strategy.on_register(self, sender, snapshot, ack)
        elif phase is wire.Phase.READY:
            info, _ = wire.BindingInfo.read(body, 0)
            if info is not None:
                rec.binding = CloneBinding(env.sender, info.peer, info.conversation, info.version)
            rec.status = "running"
            self.try_send(MessageType.REGISTER_ACK, env.sender, wire.register(wire.Phase.READY), env.conversation)
            self.handover(env.sender)
        elif phase is wire.Phase.REJOIN:
            self._on_rejoin(env, rec, body)

    def handover(self, aid: AgentId) -> int:
        """Deliver the outage buffer to the recreated agent, oldest first."""
        rec = self.platform.registry.get(aid)
        if rec is not None and rec.binding is not None:
            rec.binding.status = ACTIVE
        buf = self.buffers.pop(aid, None)
        if buf is None:
            return 0
        for env in buf.items:
            self.platform.deliver(env)
        self.platform.emit("handover", aid=aid, forwarded=len(buf), dropped=buf.dropped)
        return len(buf)

    def buffer_for(self, aid: AgentId) -> OutageBuffer | None:
        return self.buffers.get(aid)

    def open_buffer(self, aid: AgentId) -> OutageBuffer:
        return self.buffers.setdefault(aid, OutageBuffer(self.cfg.outage_buffer))

    def _on_clone_request(self, env: Envelope) -> None:
        worker = env.sender
        cid = AgentId(clone_name(worker), self.platform.address)
        rec = self.platform.registry.get(cid)
        if rec is not None and rec.agent is not None and rec.agent.alive:
            self.platform.forward(env, cid)
            return
        if rec is not None and self.executor.busy(cid):
            return  # being recreated from the worker already
        try:
            state = decode_snapshot(env.payload)
        except MalformedBlob as exc:
            log.warning("%s: bad clone request from %s: %s", self.id, worker, exc)
            return
        self.platform.spawn_clone(cid, worker, env.conversation, state, self)

    def _on_aid_exchange(self, env: Envelope) -> None:
        kind, aids = wire.read_aid_list(env.payload)
        self.platform.peer_monitors = tuple(aids)
        if kind == 0:
            self.try_send(MessageType.AID_EXCHANGE, env.sender,
                          wire.aid_list(1, self.platform.monitor_ids), env.conversation)

    # environment

    def update_env(self, update: StateUpdate) -> EnvState:
        """Advance the environment and broadcast the change. Raises VersionMismatch."""
        self.env_state = apply_update(self.env_state, update)
        self._broadcast(encode_update(update))
        return self.env_state

    def _broadcast(self, blob: bytes) -> None:
        for aid, agent in list(self.platform.agents.items()):
            if agent.alive and agent.role != "monitor":
                self.try_send(MessageType.SYNC_UPDATE, aid, blob)

    def _on_env_request(self, env: Envelope) -> None:
        if not env.payload:
            return
        mode = env.payload[0]
        ok = False
        try:
            update = decode_update(env.payload[1:])
            if self.primary:
                if mode == wire.EnvMode.APPEND and update.from_version != self.env_state.version:
                    update = StateUpdate(update.ops, self.env_state.version)
                self.update_env(update)
                ok = True
        except (MalformedBlob, VersionMismatch) as exc:
            log.debug("%s: env request from %s refused: %s", self.id, env.sender, exc)
        self.try_send(MessageType.SYNC_ACK, env.sender, env_reply(ok, self.env_state.version), env.conversation)

    # restart

    def rebuild(self) -> None:
        """Recover supervision and the environment after a restart.

        Live agents are asked to re-register; dead ones that nobody recovered
        are treated as fresh failures.
        """
        self.rebuilding = set()
        dead = []
        for rec in list(self.platform.registry.values()):
            if rec.role == "monitor":
                continue
            mine = rec.supervisor == self.id
            if rec.agent is not None and rec.agent.alive:
                if mine or self.primary:
                    self.rebuilding.add(rec.id)
                    self.try_send(MessageType.REGISTER, rec.id, wire.register(wire.Phase.REJOIN_REQUEST))
            elif mine and rec.status == "dead":
                dead.append(rec)
        for rec in dead:
            self.supervised[rec.id] = _Watch(rec.role, rec.incarnation, self.now())
            self._failed(rec.id, rec.incarnation)
        if self.rebuilding:
            self.call_later(self.cfg.failure_timeout, self._finish_rebuild)
        else:
            self._finish_rebuild()

    def _on_rejoin(self, env: Envelope, rec, body: bytes) -> None:
        info, pos = wire.BindingInfo.read(body, 0)
        env_blob, _ = wire.read_blob(body, pos)
        if rec.supervisor == self.id:
            self.supervise(env.sender, rec.role, rec.incarnation)
            if info is not None:
                if rec.role == "worker":
                    rec.binding = CloneBinding(env.sender, info.peer, info.conversation, info.version)
                else:
                    rec.binding = CloneBinding(info.peer, env.sender, info.conversation, info.version)
        if self.primary and env_blob:
            view = decode_snapshot(env_blob, EnvState)
            if view.version > self.env_state.version:
                self.env_state = view
        if self.rebuilding is not None:
            self.rebuilding.discard(env.sender)
            if not self.rebuilding:
                self._finish_rebuild()

    def _finish_rebuild(self) -> None:
        if self.rebuilding is None:
            return
        self.rebuilding = None
        if self.primary and self.env_state.version:
            self._broadcast(encode_snapshot(self.env_state))
        self.platform.registry[self.id].status = "running"
        self.platform.emit("monitor_recreated", aid=self.id, env_version=self.env_state.version)
