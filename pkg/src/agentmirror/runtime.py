"""Platforms: agent hosting, registry, routing and the monitor watchdog."""

from __future__ import annotations

import itertools
import logging
import random
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .agent import Behavior
from .errors import (
    AgentNotRunning,
    ConfigError,
    Disconnected,
    DuplicateName,
    UnknownAgent,
)
from .ids import AgentId, PlatformAddress
from .loop import RealLoop, SimLoop
from .mirror import CloneAgent, CloneBinding, MirrorStrategy
from .monitor import APP_TYPES, MonitorAgent
from .state import EnvState, LocalState, StateUpdate
from .transport import Envelope, InProcessNetwork, MessageType, SocketEndpoint
from .worker import WorkerAgent
from . import wire

log = logging.getLogger(__name__)

RUNNING = "running"
DEAD = "dead"
RECREATING = "recreating"

_TRANSITIONS = {
    (RUNNING, DEAD), (DEAD, RECREATING), (RECREATING, RUNNING),
    # a recreated agent may crash again before it finished registering
    (RECREATING, DEAD),
}


@dataclass
class MonitorConfig:
    heartbeat_interval: float = 0.1
    failure_timeout: float | None = None
    shards: int = 1
    retry_interval: float = 0.05
    max_attempts: int = 8
    sync_timeout: float = 0.2
    outage_buffer: int = 4096

    def __post_init__(self):
        if self.failure_timeout is None:
            self.failure_timeout = 3 * self.heartbeat_interval
        if self.heartbeat_interval <= 0:
            raise ConfigError("heartbeat_interval must be positive")
        if self.failure_timeout <= self.heartbeat_interval:
            raise ConfigError("failure_timeout must exceed heartbeat_interval")
        if not isinstance(self.shards, int) or self.shards < 1:
            raise ConfigError("shards must be a positive integer")
        if self.max_attempts < 1 or self.retry_interval <= 0 or self.sync_timeout <= 0:
            raise ConfigError("retry settings must be positive")
        if self.outage_buffer < 1:
            raise ConfigError("outage_buffer must be positive")


@dataclass
class PlatformConfig:
    platform_name: str
    host: str = "127.0.0.1"
    port: int = 7000
    mode: str = "inproc"
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("inproc", "socket"):
            raise ConfigError(f"mode must be inproc or socket, got {self.mode!r}")
        try:
            self.address = PlatformAddress(self.platform_name, self.host, self.port)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_CONFIG_KEYS = {
    "platform_name", "host", "port", "mode",
    "heartbeat_interval_ms", "failure_timeout_ms", "monitor_shards",
}


def parse_kv(text: str, what: str) -> list[tuple[str, str, int]]:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{what} line {lineno}: expected 'key = value'")
        out.append((key.strip(), value.strip(), lineno))
    return out


def parse_platform_config(text: str) -> PlatformConfig:
    values: dict[str, str] = {}
    for key, value, lineno in parse_kv(text, "platform config"):
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"platform config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"platform config line {lineno}: duplicate key {key!r}")
        values[key] = value
    if "platform_name" not in values:
        raise ConfigError("platform config: platform_name is required")

    def number(key, conv):
        try:
            return conv(values[key])
        except ValueError:
            raise ConfigError(f"platform config: {key} must be a number, got {values[key]!r}") from None

    mon = {}
    if "heartbeat_interval_ms" in values:
        mon["heartbeat_interval"] = number("heartbeat_interval_ms", float) / 1000
    if "failure_timeout_ms" in values:
        mon["failure_timeout"] = number("failure_timeout_ms", float) / 1000
    if "monitor_shards" in values:
        mon["shards"] = number("monitor_shards", int)
    kwargs = {"platform_name": values["platform_name"], "monitor": MonitorConfig(**mon)}
    if "host" in values:
        kwargs["host"] = values["host"]
    if "port" in values:
        kwargs["port"] = number("port", int)
    if "mode" in values:
        kwargs["mode"] = values["mode"]
    return PlatformConfig(**kwargs)


def load_platform_config(path) -> PlatformConfig:
    return parse_platform_config(Path(path).read_text(encoding="utf-8"))


@dataclass
class AgentRecord:
    id: AgentId
    role: str
    status: str = RUNNING
    behavior: Behavior | None = None
    incarnation: int = 0
    supervisor: AgentId | None = None
    binding: CloneBinding | None = None
    agent: object = None

    @property
    def state(self) -> LocalState | None:
        return getattr(self.agent, "state", None)

    def transition(self, status: str) -> None:
        if status != self.status and (self.status, status) not in _TRANSITIONS:
            raise AgentNotRunning(f"{self.id}: illegal transition {self.status} -> {status}")
        self.status = status


@dataclass(frozen=True)
class Event:
    kind: str
    time: float  # platform clock
    wall: float  # perf_counter
    data: dict


class Platform:
    """One agent container: registry, monitors, routing, and a watchdog."""

    def __init__(self, config: PlatformConfig, loop, strategy=None, network: InProcessNetwork | None = None):
        self.config = config
        self.address = config.address
        self.loop = loop
        self.strategy = strategy if strategy is not None else MirrorStrategy()
        self.rng = random.Random(f"{config.seed}/{config.platform_name}")
        self.registry: dict[AgentId, AgentRecord] = {}
        self.agents: dict = {}
        self.peer_monitors: tuple[AgentId, ...] = ()
        self.observers: list = []
        self.dropped = 0
        self._seq: dict[tuple[AgentId, AgentId, bytes], itertools.count] = {}
        self._names = itertools.count()
        self.closed = False
        if config.mode == "inproc":
            if network is None:
                raise ConfigError("in-process mode needs a shared InProcessNetwork")
            self.endpoint = network.open(self.address, self)
        else:
            self.endpoint = SocketEndpoint(self.address, self, loop)
        cfg = config.monitor
        self.monitor_ids = tuple(AgentId(f"monitor-{i}", self.address) for i in range(cfg.shards))
        self._monitor_set = frozenset(self.monitor_ids)
        for i, mid in enumerate(self.monitor_ids):
            self._start_monitor(mid, i)
        self._watchdog = self.loop.call_later(cfg.failure_timeout, self._watch_monitors)

    # identity

    @property
    def primary_monitor_id(self) -> AgentId:
        return self.monitor_ids[0]

    @property
    def monitor(self) -> AgentId:
        return self.monitor_ids[0]

    def monitor_agent(self, shard: int = 0) -> MonitorAgent:
        return self.agents[self.monitor_ids[shard]]

    @property
    def env_state(self) -> EnvState:
        return self.monitor_agent(0).env_state

    def is_monitor(self, aid: AgentId) -> bool:
        return aid in self._monitor_set

    def shard_for(self, name: str) -> AgentId:
        return self.monitor_ids[zlib.crc32(name.encode("utf-8")) % len(self.monitor_ids)]

    def agent(self, aid: AgentId | str):
        if isinstance(aid, str):
            aid = AgentId(aid, self.address)
        return self.agents.get(aid)

    # events

    def subscribe(self, fn) -> None:
        self.observers.append(fn)

    def emit(self, kind: str, **data) -> None:
        if not self.observers:
            return
        ev = Event(kind, self.loop.now(), time.perf_counter(), data)
        for fn in list(self.observers):
            fn(ev)

    # routing

    def _next_seq(self, sender: AgentId, receiver: AgentId, conv: bytes) -> int:
        key = (sender, receiver, conv)
        c = self._seq.get(key)
        if c is None:
            c = self._seq[key] = itertools.count()
        return next(c)

    def route(self, sender, msg_type: MessageType, receiver: AgentId, payload: bytes, conv: bytes) -> None:
        if self.closed:
            raise Disconnected(f"platform {self.address} is shut down")
        env = Envelope(msg_type, sender.id, receiver, conv, self._next_seq(sender.id, receiver, conv), payload)
        if receiver.platform == self.address:
            self.loop.call_soon(self.put, env)
        else:
            self.endpoint.send(env)

    def forward(self, env: Envelope, receiver: AgentId) -> None:
        """Re-address an envelope to a local agent, keeping its original sender."""
        fwd = Envelope(env.msg_type, env.sender, receiver, env.conversation, env.seq, env.payload)
        self.loop.call_soon(self._deliver_to, fwd, receiver)

    def put(self, env: Envelope) -> None:
        """Inbound delivery from the network or a local sender."""
        self._deliver_to(env, env.receiver)

    def _deliver_to(self, env: Envelope, receiver: AgentId) -> None:
        agent = self.agents.get(receiver)
        rec = self.registry.get(receiver)
        buf = None
        if rec is not None and rec.role == "worker" and env.msg_type in APP_TYPES:
            sup = self.agents.get(rec.supervisor) if rec.supervisor else None
            if sup is not None and sup.alive:
                buf = sup.buffer_for(receiver)
                if buf is None and rec.status == DEAD:
                    # dead but not yet detected: hold it rather than lose it
                    buf = sup.open_buffer(receiver)
        if buf is not None:
            # outage in progress: hold application traffic until handover
            buf.append(env)
        elif agent is not None and agent.alive:
            agent.receive(env)
        else:
            self.dropped += 1

    def deliver(self, env: Envelope) -> None:
        """Hand an envelope straight to its (live) receiver, bypassing buffers."""
        agent = self.agents.get(env.receiver)
        if agent is not None and agent.alive:
            agent.receive(env)
        else:
            self.dropped += 1

    # lifecycle

    def _start_monitor(self, mid: AgentId, shard: int, rebuild: bool = False) -> MonitorAgent:
        mon = MonitorAgent(self, mid, shard, self.config.monitor)
        rec = self.registry.get(mid)
        if rec is None:
            rec = self.registry[mid] = AgentRecord(mid, "monitor")
        else:
            rec.transition(RECREATING)
            rec.incarnation += 1
        rec.agent = mon
        self.agents[mid] = mon
        if rec.status != RECREATING:
            rec.status = RUNNING
        if rebuild:
            mon.rebuild()
        return mon

    def _watch_monitors(self) -> None:
        if self.closed:
            return
        for i, mid in enumerate(self.monitor_ids):
            if self.registry[mid].status == DEAD:
                log.info("restarting %s", mid)
                self._start_monitor(mid, i, rebuild=True)
        self._watchdog = self.loop.call_later(self.config.monitor.failure_timeout, self._watch_monitors)

    def spawn_worker(self, behavior: Behavior, initial: LocalState, name: str | None = None) -> WorkerAgent:
        if name is None:
            name = f"agent-{next(self._names)}"
        aid = AgentId(name, self.address)
        if aid in self.registry:
            raise DuplicateName(f"{aid} already registered")
        mid = self.shard_for(name)
        rec = self.registry[aid] = AgentRecord(aid, "worker", RUNNING, behavior, supervisor=mid)
        agent = WorkerAgent(self, aid, behavior, initial, mid, self.strategy)
        rec.agent = agent
        self.agents[aid] = agent
        agent.start()
        return agent

    def respawn_worker(self, aid: AgentId, state: LocalState, binding: CloneBinding | None) -> AgentId:
        rec = self.registry[aid]
        rec.transition(RECREATING)
        rec.incarnation += 1
        if binding is not None:
            binding = CloneBinding(aid, binding.clone, binding.conversation, state.version)
        agent = WorkerAgent(self, aid, rec.behavior, state, rec.supervisor or self.shard_for(aid.name),
                            self.strategy, binding=binding, recreated=True)
        rec.agent = agent
        rec.binding = binding
        self.agents[aid] = agent
        agent.start()
        return aid

    def spawn_clone(self, cid: AgentId, worker: AgentId, conversation: bytes, state: LocalState,
                    monitor: MonitorAgent) -> AgentId:
        rec = self.registry.get(cid)
        if rec is None:
            rec = self.registry[cid] = AgentRecord(cid, "clone", RUNNING)
        else:
            rec.transition(RECREATING)
            rec.incarnation += 1
        clone = CloneAgent(self, cid, worker, conversation, state)
        rec.agent = clone
        rec.supervisor = monitor.id
        rec.binding = CloneBinding(worker, cid, conversation, state.version)
        self.agents[cid] = clone
        monitor.supervise(cid, "clone", rec.incarnation)
        clone.announce()
        if rec.status == RECREATING:
            rec.transition(RUNNING)
            self.emit("clone_recreated", aid=cid, version=state.version)
        else:
            self.emit("clone_created", aid=cid, version=state.version)
        return cid

    def fence(self, aid: AgentId) -> None:
        rec = self.registry[aid]
        agent = self.agents.get(aid)
        if agent is not None and agent.alive:
            agent.halt()
        if rec.status != DEAD:
            rec.transition(DEAD)

    def kill(self, aid: AgentId) -> None:
        rec = self.registry.get(aid)
        if rec is None:
            raise UnknownAgent(f"{aid} is not registered")
        agent = self.agents.get(aid)
        if agent is None or not agent.alive:
            raise AgentNotRunning(f"{aid} is not running")
        agent.halt()
        rec.transition(DEAD)
        self.emit("killed", aid=aid, role=rec.role)

    def close(self) -> None:
        self.closed = True
        self._watchdog.cancel()
        for agent in self.agents.values():
            agent.halt()
        self.endpoint.close()

    # accounting

    def count(self, role: str | None = None, status: str | None = None) -> int:
        return sum(1 for r in self.registry.values()
                   if (role is None or r.role == role) and (status is None or r.status == status))

    def quiescent(self) -> bool:
        """No agent dead or recreating, every live agent registered."""
        for rec in self.registry.values():
            if rec.status != RUNNING:
                return False
            if rec.role == "worker" and not rec.agent.ready:
                return False
        return True


# public operations

DEFAULT_WAIT = 30.0


def launch_platform(config: PlatformConfig, *, loop=None, network: InProcessNetwork | None = None,
                    strategy=None) -> Platform:
    """Start a platform with its monitor shards registered and an empty environment."""
    if loop is None:
        loop = network.loop if network is not None else (SimLoop() if config.mode == "inproc" else RealLoop())
    if config.mode == "inproc" and network is None:
        network = InProcessNetwork(loop, seed=config.seed)
    return Platform(config, loop, strategy, network)


def exchange_aids(local: Platform, remote: Platform, timeout: float = 5.0) -> None:
    """Tell each platform's monitors about the other's. Idempotent."""
    loop = local.loop
    mon = local.monitor_agent(0)
    remote_primary = remote.primary_monitor_id
    deadline = loop.now() + timeout
    while True:
        mon.send(MessageType.AID_EXCHANGE, remote_primary, wire.aid_list(0, local.monitor_ids))
        wait = min(local.config.monitor.failure_timeout, max(deadline - loop.now(), 0.0))
        if loop.run_until(lambda: set(local.peer_monitors) == set(remote.monitor_ids)
                          and set(remote.peer_monitors) == set(local.monitor_ids), timeout=wait):
            return
        if loop.now() >= deadline:
            raise Disconnected(f"no AID exchange with {remote.address} within {timeout}s")


def spawn_agent(platform: Platform, behavior: Behavior, initial: LocalState | None = None,
                name: str | None = None, timeout: float | None = None) -> AgentId:
    """Create a worker and wait until its registration is acknowledged."""
    agent = platform.spawn_worker(behavior, initial if initial is not None else LocalState(), name)
    ok = platform.loop.run_until(lambda: agent.ready or agent.error is not None,
                                 timeout=DEFAULT_WAIT if timeout is None else timeout)
    if agent.error is not None:
        raise agent.error
    if not ok:
        raise TimeoutError(f"{agent.id} did not finish registering")
    return agent.id


def kill_agent(platform: Platform, aid: AgentId) -> None:
    platform.kill(aid)


def update_env(monitor: MonitorAgent, update: StateUpdate) -> EnvState:
    return monitor.update_env(update)
