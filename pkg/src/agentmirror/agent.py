"""Base class for everything hosted on a platform."""

from __future__ import annotations

import logging

from .errors import Disconnected, OversizePayload
from .ids import AgentId
from .transport import Envelope, MessageType, new_conversation
from . import wire

log = logging.getLogger(__name__)


class Behavior:
    """Application logic plugged into a worker.

    A behavior must not keep state of its own: everything that has to survive
    a crash lives in the worker's LocalState, so the same behavior object can
    drive a recreated worker.
    """

    def on_start(self, agent) -> None:
        pass

    def on_message(self, agent, env: Envelope) -> None:
        pass


class Agent:
    """One sequential actor. Envelopes are handled one at a time on the loop.

    All timers go through :meth:`call_later` so a kill cancels them together
    with the agent, which is what makes a kill look like a crash.
    """

    role = "agent"

    def __init__(self, platform, aid: AgentId):
        self.platform = platform
        self.id = aid
        self.alive = True
        self._timers: set = set()
        self._convs: dict[AgentId, bytes] = {}

    @property
    def loop(self):
        return self.platform.loop

    def now(self) -> float:
        return self.platform.loop.now()

    def call_later(self, delay: float, fn, *args):
        box = []

        def fire():
            self._timers.discard(box[0])
            if self.alive:
                fn(*args)

        t = self.platform.loop.call_later(delay, fire)
        box.append(t)
        self._timers.add(t)
        return t

    def conversation_with(self, peer: AgentId) -> bytes:
        conv = self._convs.get(peer)
        if conv is None:
            conv = self._convs[peer] = new_conversation(self.platform.rng)
        return conv

    def send(self, msg_type: MessageType, receiver: AgentId, payload: bytes = b"",
             conversation: bytes | None = None) -> None:
        """Send one envelope. Raises Disconnected when the peer is unreachable."""
        if conversation is None:
            conversation = self.conversation_with(receiver)
        self.platform.route(self, msg_type, receiver, payload, conversation)

    def try_send(self, msg_type: MessageType, receiver: AgentId, payload: bytes = b"",
                 conversation: bytes | None = None) -> bool:
        try:
            self.send(msg_type, receiver, payload, conversation)
            return True
        except (Disconnected, OversizePayload) as exc:
            log.debug("%s: send %s to %s failed: %s", self.id, msg_type.name, receiver, exc)
            return False

    def receive(self, env: Envelope) -> None:
        if not self.alive:
            return
        if env.msg_type is MessageType.HEARTBEAT and env.payload == wire.PING:
            self.try_send(MessageType.HEARTBEAT, env.sender, wire.PONG, env.conversation)
            return
        self.handle(env)

    def handle(self, env: Envelope) -> None:
        log.debug("%s ignores %s from %s", self.id, env.msg_type.name, env.sender)

    def halt(self) -> None:
        """Stop immediately: no flush, no goodbye, pending timers discarded."""
        self.alive = False
        for t in self._timers:
            t.cancel()
        self._timers.clear()
