"""Round-robin English auction among monitored bidder agents.

Each round the auctioneer calls every still-active bidder in queue order with
the current price ``c``. A bidder bids ``c + increment`` if that fits its
budget and drops out otherwise. The auction ends after a round that leaves at
most one bidder: a sole survivor wins at its bid; if everyone dropped in the
same round, the first bidder in queue order wins at the previous price.

Bidders keep everything in their LocalState, so a bidder recreated from its
clone or from the store answers exactly as the crashed one would have. A
bidder that is down is skipped until its handover and then called again,
which is why crashes cannot change the result.
"""

from __future__ import annotations

import logging
import random
import tempfile
from dataclasses import dataclass, field

from .agent import Behavior
from .errors import ConfigError, RecoveryFailed, TooManyKills
from .ids import AgentId
from .loop import SimLoop
from .mirror import MirrorStrategy
from .runtime import PlatformConfig, MonitorConfig, Platform, exchange_aids, parse_kv, spawn_agent
from .state import LocalState, StateUpdate, encode_snapshot
from .store import StateStore, StoreStrategy
from .transport import DropRate, InProcessNetwork, MessageType
from . import wire

log = logging.getLogger(__name__)

ROLES = ("worker", "clone")


@dataclass
class AuctionConfig:
    n_bidders: int
    seed: int = 0
    increment: int = 1
    strategy: str = "mirror"
    crash_schedule: list[tuple[int, str, str]] = field(default_factory=list)
    budgets: dict[str, int] | None = None
    latency: float = 0.001
    jitter: float = 0.0
    drop_rate: float = 0.0
    store_dir: str | None = None

    def __post_init__(self):
        if not isinstance(self.n_bidders, int) or self.n_bidders < 1:
            raise ConfigError("n_bidders must be a positive integer")
        if self.increment < 1:
            raise ConfigError("increment must be positive")
        if self.strategy not in ("mirror", "store"):
            raise ConfigError(f"strategy must be mirror or store, got {self.strategy!r}")
        if self.budgets is None:
            self.budgets = derive_budgets(self.seed, self.n_bidders)
        elif sorted(self.budgets) != bidder_names(self.n_bidders):
            raise ConfigError("budgets must name every bidder exactly once")
        names = set(bidder_names(self.n_bidders))
        for round_no, name, role in self.crash_schedule:
            if round_no < 1:
                raise ConfigError(f"crash round must be >= 1, got {round_no}")
            if name not in names:
                raise ConfigError(f"crash names unknown bidder {name!r}")
            if role not in ROLES:
                raise ConfigError(f"crash role must be worker or clone, got {role!r}")
            if role == "clone" and self.strategy == "store":
                raise ConfigError("the store strategy has no clones to crash")


@dataclass
class AuctionResult:
    winner: str
    final_price: int
    rounds: int
    per_agent_final_states: dict[str, LocalState]

    def summary(self) -> str:
        return f"winner={self.winner} final_price={self.final_price} rounds={self.rounds}"


def bidder_names(n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"bidder-{i:0{width}d}" for i in range(n)]


def derive_budgets(seed: int, n: int) -> dict[str, int]:
    """Distinct budgets, so the winner is never decided by a tie."""
    rng = random.Random(seed)
    values = rng.sample(range(1, 1 + max(4 * n, 20)), n)
    return dict(zip(bidder_names(n), values))


def make_crash_schedule(seed: int, n_kills: int, n_bidders: int, rounds_hint: int,
                        roles: tuple[str, ...] = ("worker",)) -> list[tuple[int, str, str]]:
    """Pick ``n_kills`` distinct bidders and a round in ``1..rounds_hint`` for each."""
    if n_kills >= n_bidders:
        raise TooManyKills(f"{n_kills} kills would leave no bidder among {n_bidders}")
    if n_kills < 0 or rounds_hint < 1:
        raise ValueError("n_kills must be >= 0 and rounds_hint >= 1")
    rng = random.Random(f"crash/{seed}")
    names = rng.sample(bidder_names(n_bidders), n_kills)
    sched = [(rng.randint(1, rounds_hint), name, rng.choice(roles)) for name in names]
    return sorted(sched)


def initial_bidder_state(budget: int) -> LocalState:
    return LocalState({"budget": budget, "last_bid": 0, "remaining_budget": budget,
                       "round": 0, "passed": False})


class Bidder(Behavior):
    """Bid the next price while it fits the budget."""

    def on_message(self, agent, env) -> None:
        if env.msg_type is MessageType.BID_CALL:
            round_no, price, increment = wire.read_bid_call(env.payload)
            budget = agent.state["budget"]
            amount = price + increment
            if amount <= budget:
                changes = {"last_bid": amount, "remaining_budget": budget - amount,
                           "round": round_no, "passed": False}
            else:
                changes = {"round": round_no, "passed": True}
                amount = None
            reply = wire.bid(round_no, amount)
            sender, conv = env.sender, env.conversation
            agent.update_state(changes, then=lambda: agent.try_send(MessageType.BID, sender, reply, conv))
        elif env.msg_type is MessageType.AUCTION_RESULT:
            agent.update_state({"won": env.payload[:1] == b"\x01"})


class Auctioneer:
    """Runs the bid queue from the primary monitor."""

    def __init__(self, monitor, bidders: list[AgentId], increment: int, on_round=None, reply_timeout=None):
        self.monitor = monitor
        self.platform = monitor.platform
        self.queue = list(bidders)
        self.increment = increment
        self.on_round = on_round
        self.reply_timeout = reply_timeout or 2 * monitor.cfg.failure_timeout
        self.price = 0
        self.rounds = 0
        self.active: list[AgentId] = list(bidders)
        self.bid_this_round: list[AgentId] = []
        self._idx = 0
        self._awaiting: AgentId | None = None
        self._waiting_for: AgentId | None = None
        self._call_token = 0
        self.result: tuple[str, int, int] | None = None
        self.error: Exception | None = None
        self.calls = 0
        monitor.extensions[MessageType.BID] = self._on_bid
        self.platform.subscribe(self._observe)

    def start(self) -> None:
        if len(self.active) <= 1:
            self._finish(self.active[0] if self.active else None, 0)
            return
        self._begin_round()

    def _begin_round(self) -> None:
        self.rounds += 1
        self.bid_this_round = []
        self._idx = 0
        if self.on_round is not None:
            self.on_round(self.rounds)
        self.monitor.update_env(StateUpdate({"current_price": self.price, "round": self.rounds},
                                            self.monitor.env_state.version))
        self._call_next()

    def _up(self, aid: AgentId) -> bool:
        rec = self.platform.registry[aid]
        return rec.status == "running" and rec.agent.alive and rec.agent.ready

    def _call_next(self) -> None:
        if self.result is not None or self.error is not None:
            return
        if self._idx >= len(self.active):
            self._end_round()
            return
        aid = self.active[self._idx]
        if not self._up(aid):
            # hold the price until this bidder is back
            self._waiting_for = aid
            return
        self._waiting_for = None
        self._awaiting = aid
        self._call_token += 1
        self.calls += 1
        self.monitor.try_send(MessageType.BID_CALL, aid, wire.bid_call(self.rounds, self.price, self.increment))
        self.monitor.call_later(self.reply_timeout, self._reply_timeout, self._call_token)

    def _reply_timeout(self, token: int) -> None:
        if token == self._call_token and self._awaiting is not None:
            self._awaiting = None
            self._call_next()

    def _on_bid(self, env) -> None:
        round_no, amount = wire.read_bid(env.payload)
        if env.sender != self._awaiting or round_no != self.rounds:
            return  # a late or duplicate answer
        self._awaiting = None
        self._call_token += 1
        if amount is not None:
            self.bid_this_round.append(env.sender)
        self._idx += 1
        self._call_next()

    def _observe(self, ev) -> None:
        if ev.kind == "ready" and ev.data["aid"] == self._waiting_for:
            self.monitor.loop.call_soon(self._resume)
        elif ev.kind == "recovery_failed" and ev.data["aid"] in self.queue:
            self.error = RecoveryFailed(f"{ev.data['aid']} lost: {ev.data['error']}")

    def _resume(self) -> None:
        if self._waiting_for is not None and self._up(self._waiting_for):
            self._call_next()

    def _end_round(self) -> None:
        survivors = self.bid_this_round
        if len(survivors) > 1:
            self.active = survivors
            self.price += self.increment
            self._begin_round()
        elif len(survivors) == 1:
            self._finish(survivors[0], self.price + self.increment)
        else:
            self._finish(self.active[0], self.price)

    def _finish(self, winner: AgentId | None, price: int) -> None:
        self.result = (winner.name if winner else "", price, self.rounds)
        for aid in self.queue:
            won = b"\x01" if aid == winner else b"\x00"
            self.monitor.try_send(MessageType.AUCTION_RESULT, aid, won + wire.pack_u64(price))


class AuctionRun:
    """Platforms, bidders and an auctioneer for one AuctionConfig on the simulated clock."""

    def __init__(self, cfg: AuctionConfig, monitor_cfg: MonitorConfig | None = None):
        self.cfg = cfg
        self.loop = SimLoop()
        self.network = InProcessNetwork(self.loop, latency=cfg.latency, jitter=cfg.jitter, seed=cfg.seed)
        mcfg = monitor_cfg or MonitorConfig()
        self._tmp = None
        self.remote: Platform | None = None
        if cfg.strategy == "mirror":
            strategy = MirrorStrategy()
        else:
            path = cfg.store_dir
            if path is None:
                self._tmp = tempfile.TemporaryDirectory(prefix="auction-store-")
                path = self._tmp.name
            self.store = StateStore(path)
            strategy = StoreStrategy(self.store)
        self.local = Platform(PlatformConfig("local", port=7001, monitor=mcfg, seed=cfg.seed),
                              self.loop, strategy, self.network)
        if cfg.strategy == "mirror":
            self.remote = Platform(PlatformConfig("remote", port=7002, monitor=mcfg, seed=cfg.seed),
                                   self.loop, strategy, self.network)
            exchange_aids(self.local, self.remote)
        self.bidders = [spawn_agent(self.local, Bidder(), initial_bidder_state(cfg.budgets[name]), name)
                        for name in bidder_names(cfg.n_bidders)]
        if cfg.drop_rate:
            for p in (self.local, self.remote):
                if p is not None:
                    p.endpoint.inject_fault(DropRate(cfg.drop_rate, cfg.seed))
        self._crashes: dict[int, list[tuple[str, str]]] = {}
        for round_no, name, role in cfg.crash_schedule:
            self._crashes.setdefault(round_no, []).append((name, role))
        self.auctioneer = Auctioneer(self.local.monitor_agent(0), self.bidders, cfg.increment, self._on_round)

    def _on_round(self, round_no: int) -> None:
        for name, role in self._crashes.get(round_no, ()):
            if role == "worker":
                aid = AgentId(name, self.local.address)
                platform = self.local
            else:
                aid = AgentId(f"{name}~{self.local.address.platform_name}", self.remote.address)
                platform = self.remote
            rec = platform.registry[aid]
            if rec.agent is not None and rec.agent.alive:
                platform.kill(aid)

    def platforms(self) -> list[Platform]:
        return [p for p in (self.local, self.remote) if p is not None]

    def converged(self) -> bool:
        if not all(p.quiescent() for p in self.platforms()):
            return False
        if not all("won" in self.local.agents[aid].state for aid in self.bidders):
            return False  # result not delivered everywhere yet
        if self.remote is None:
            return True
        for aid in self.bidders:
            worker = self.local.agents[aid]
            b = worker.sync.binding
            if b is None:
                return False
            clone = self.remote.agents.get(b.clone)
            if clone is None or not clone.alive or clone.state != worker.state:
                return False
            if b.last_acked_version != worker.state.version:
                return False
        return True

    def run(self, timeout: float = 600.0) -> AuctionResult:
        a = self.auctioneer
        a.start()
        self.loop.run_until(lambda: a.result is not None or a.error is not None, timeout=timeout)
        if a.error is not None:
            raise a.error
        if a.result is None:
            raise RecoveryFailed("auction did not finish")
        # let recoveries and the sync stream settle
        if not self.loop.run_until(lambda: a.error is not None or self.converged(), timeout=timeout):
            raise RecoveryFailed("platforms did not quiesce after the auction")
        if a.error is not None:
            raise a.error
        winner, price, rounds = a.result
        states = {aid.name: self.local.agents[aid].state for aid in self.bidders}
        return AuctionResult(winner, price, rounds, states)

    def close(self) -> None:
        for p in self.platforms():
            p.close()
        if self.cfg.strategy == "store":
            self.store.close()
        if self._tmp is not None:
            self._tmp.cleanup()


def run_auction(cfg: AuctionConfig, monitor_cfg: MonitorConfig | None = None) -> AuctionResult:
    run = AuctionRun(cfg, monitor_cfg)
    try:
        return run.run()
    finally:
        run.close()


_SCENARIO_INT = {"n_bidders", "seed", "increment"}
_SCENARIO_KEYS = _SCENARIO_INT | {"strategy", "crash", "budget", "latency_ms", "jitter_ms", "drop_rate"}


def parse_scenario(text: str) -> AuctionConfig:
    """``key = value`` lines; ``crash = round,name,role`` and ``budget = name,amount`` may repeat."""
    kwargs: dict = {}
    crashes = []
    budgets = {}
    for key, value, lineno in parse_kv(text, "scenario"):
        if key not in _SCENARIO_KEYS:
            raise ConfigError(f"scenario line {lineno}: unknown key {key!r}")
        try:
            if key == "crash":
                r, name, role = (p.strip() for p in value.split(","))
                crashes.append((int(r), name, role))
            elif key == "budget":
                name, amount = (p.strip() for p in value.split(","))
                budgets[name] = int(amount)
            elif key in _SCENARIO_INT:
                kwargs[key] = int(value)
            elif key in ("latency_ms", "jitter_ms"):
                kwargs[key[:-3]] = float(value) / 1000
            elif key == "drop_rate":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except ValueError:
            raise ConfigError(f"scenario line {lineno}: bad value {value!r} for {key}") from None
    if "n_bidders" not in kwargs:
        raise ConfigError("scenario: n_bidders is required")
    return AuctionConfig(crash_schedule=crashes, budgets=budgets or None, **kwargs)


def dump_states(result: AuctionResult) -> bytes:
    """Final bidder states as ``[u16 name len][name][u32 blob len][snapshot]`` records."""
    out = []
    for name in sorted(result.per_agent_final_states):
        raw = name.encode("utf-8")
        out.append(len(raw).to_bytes(2, "big") + raw
                   + wire.pack_blob(encode_snapshot(result.per_agent_final_states[name])))
    return b"".join(out)
