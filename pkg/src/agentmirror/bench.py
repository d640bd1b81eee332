"""Benchmark harness: registration, recreation, memory and launch measurements.

Every run builds fresh platforms, admits ``n`` bidder agents one after the
other, then kills a few and waits for them to come back. Durations come from
platform events stamped with ``time.perf_counter`` (``clock = wall``) or with
the simulated clock (``clock = sim``, fully reproducible).
"""

from __future__ import annotations

import contextlib
import csv
import gc
import io
import logging
import os
import random
import socket
import statistics
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .auction import Bidder, initial_bidder_state
from .errors import BenchAborted, ConfigError, RecoveryFailed, UnsupportedPlatformCounter
from .loop import RealLoop, SimLoop
from .mirror import MirrorStrategy
from .runtime import MonitorConfig, Platform, PlatformConfig, exchange_aids, parse_kv, spawn_agent
from .state import encode_snapshot
from .store import StateStore, StoreStrategy
from .transport import InProcessNetwork

log = logging.getLogger(__name__)

CSV_HEADER = ("scenario", "strategy", "n_agents", "metric", "value", "run_id", "timestamp_ms")
METRICS = ("response_time", "recreation_time", "detection_time", "memory_bytes", "launch_time", "cpu_time")


@dataclass(frozen=True)
class MetricSample:
    scenario: str
    strategy: str
    n_agents: int
    metric: str
    value: float
    run_id: int
    timestamp_ms: int

    def __post_init__(self):
        if self.value < 0:
            raise ValueError(f"negative {self.metric} sample: {self.value}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    def key(self):
        return (self.scenario, self.strategy, self.n_agents, self.metric, self.run_id)


@dataclass
class BenchPlan:
    agent_counts: tuple[int, ...] = (10, 50, 100, 250, 500, 1000)
    repetitions: int = 5
    kill_counts: tuple[int, ...] = (1,)
    transport: str = "inproc"
    warmup: int = 1
    clock: str = "wall"
    seed: int = 0
    latency: float = 0.0
    scenario: str = "bench"
    store_dir: str | None = None
    store_io_delay: float = 0.0
    memory_control: bool = True
    monitor: MonitorConfig = field(default_factory=MonitorConfig)

    def __post_init__(self):
        counts = tuple(self.agent_counts)
        if not counts or any(c < 1 for c in counts) or list(counts) != sorted(set(counts)):
            raise ConfigError("agent_counts must be positive and strictly ascending")
        self.agent_counts = counts
        self.kill_counts = tuple(self.kill_counts)
        if any(k < 1 for k in self.kill_counts):
            raise ConfigError("kill_counts must be positive")
        if self.repetitions < 3:
            raise ConfigError("repetitions must be at least 3")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.transport not in ("inproc", "socket"):
            raise ConfigError("transport must be inproc or socket")
        if self.clock not in ("wall", "sim"):
            raise ConfigError("clock must be wall or sim")
        if self.clock == "sim" and self.transport == "socket":
            raise ConfigError("the simulated clock needs the in-process transport")


def _ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())


def parse_plan(text: str) -> BenchPlan:
    kwargs: dict = {}
    mon: dict = {}
    for key, value, lineno in parse_kv(text, "plan"):
        try:
            if key in ("agent_counts", "kill_counts"):
                kwargs[key] = _ints(value)
            elif key in ("repetitions", "warmup", "seed"):
                kwargs[key] = int(value)
            elif key in ("transport", "clock", "scenario", "store_dir"):
                kwargs[key] = value
            elif key == "latency_ms":
                kwargs["latency"] = float(value) / 1000
            elif key == "store_io_delay_ms":
                kwargs["store_io_delay"] = float(value) / 1000
            elif key == "memory_control":
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif key == "heartbeat_interval_ms":
                mon["heartbeat_interval"] = float(value) / 1000
            elif key == "failure_timeout_ms":
                mon["failure_timeout"] = float(value) / 1000
            else:
                raise ConfigError(f"plan line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"plan line {lineno}: bad value {value!r} for {key}") from None
    if mon:
        kwargs["monitor"] = MonitorConfig(**mon)
    return BenchPlan(**kwargs)


class SampleSink:
    """Thread-safe sample collector handing out unique run ids."""

    def __init__(self):
        self._lock = threading.Lock()
        self._samples: list[MetricSample] = []
        self._next_id = 0

    def add(self, scenario, strategy, n_agents, metric, value, timestamp_ms) -> MetricSample:
        with self._lock:
            s = MetricSample(scenario, strategy, n_agents, metric, float(value), self._next_id, int(timestamp_ms))
            self._next_id += 1
            self._samples.append(s)
            return s

    @property
    def samples(self) -> list[MetricSample]:
        with self._lock:
            return list(self._samples)


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def rss_bytes() -> int:
    try:
        with open("/proc/self/statm") as f:
            return int(f.read().split()[1]) * os.sysconf("SC_PAGE_SIZE")
    except (OSError, ValueError, IndexError) as exc:
        raise UnsupportedPlatformCounter(f"resident set size unavailable: {exc}") from exc


class Deployment:
    """Platforms for one benchmark run, plus an event log."""

    def __init__(self, plan: BenchPlan, strategy: str, run_seed: int, store_root: str):
        self.plan = plan
        self.strategy_name = strategy
        self.events: list = []
        self.store = None
        if strategy == "store":
            self.store = StateStore(Path(store_root) / f"run-{run_seed}")
            self.strategy = StoreStrategy(self.store, io_delay=plan.store_io_delay)
        elif strategy == "mirror":
            self.strategy = MirrorStrategy()
        else:
            raise ConfigError(f"unknown strategy {strategy!r}")
        if plan.transport == "inproc":
            self.loop = SimLoop()
            self.network = InProcessNetwork(self.loop, latency=plan.latency, seed=run_seed)
        else:
            self.loop = RealLoop()
            self.network = None
        self.platforms: list[Platform] = []
        self.local = self._platform("local", run_seed)
        self.remote = self._platform("remote", run_seed) if strategy == "mirror" else None
        if self.remote is not None:
            exchange_aids(self.local, self.remote)

    def _platform(self, name: str, seed: int) -> Platform:
        port = _free_port() if self.plan.transport == "socket" else 7000 + len(self.platforms)
        cfg = PlatformConfig(name, "127.0.0.1", port, self.plan.transport, self.plan.monitor, seed)
        p = Platform(cfg, self.loop, self.strategy, self.network)
        p.subscribe(self.events.append)
        self.platforms.append(p)
        return p

    def state_bytes(self) -> int:
        total = 0
        for p in self.platforms:
            for rec in p.registry.values():
                if rec.role in ("worker", "clone") and rec.agent is not None and rec.agent.alive:
                    total += len(encode_snapshot(rec.state))
        return total

    def close(self) -> None:
        for p in self.platforms:
            p.close()
        if self.store is not None:
            self.store.close()


@contextlib.contextmanager
def _gc_paused():
    """Collect up front and keep the collector out of the timed window, as timeit does."""
    was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


class Bench:
    def __init__(self, plan: BenchPlan, sink: SampleSink | None = None):
        self.plan = plan
        self.sink = sink or SampleSink()
        self.aborts: list[str] = []

    def _stamp(self, ev) -> float:
        return ev.time if self.plan.clock == "sim" else ev.wall

    def _now_ms(self, dep: Deployment) -> int:
        if self.plan.clock == "sim":
            return int(dep.loop.now() * 1000)
        return int(time.time() * 1000)

    def run(self, strategy: str) -> list[MetricSample]:
        plan = self.plan
        with tempfile.TemporaryDirectory(prefix="bench-store-") as tmp:
            root = plan.store_dir or tmp
            run_seed = plan.seed
            if plan.memory_control:
                for rep in range(plan.repetitions):
                    self._control(strategy, run_seed, root)
                    run_seed += 1
            for n in plan.agent_counts:
                for rep in range(plan.warmup + plan.repetitions):
                    with _gc_paused():
                        self._one(strategy, n, run_seed, root, record=rep >= plan.warmup)
                    run_seed += 1
        return self.sink.samples

    def _control(self, strategy: str, run_seed: int, root: str) -> None:
        dep = Deployment(self.plan, strategy, run_seed, root)
        try:
            self._memory(dep, strategy, 0)
        finally:
            dep.close()

    def _memory(self, dep: Deployment, strategy: str, n: int) -> None:
        sc = self.plan.scenario
        ts = self._now_ms(dep)
        self.sink.add(f"{sc}/state", strategy, n, "memory_bytes", dep.state_bytes(), ts)
        if self.plan.clock == "wall":
            try:
                self.sink.add(f"{sc}/rss", strategy, n, "memory_bytes", rss_bytes(), ts)
            except UnsupportedPlatformCounter as exc:
                log.warning("memory sample missing: %s", exc)
                self.aborts.append(f"rss missing: {exc}")

    def _one(self, strategy: str, n: int, run_seed: int, root: str, record: bool) -> None:
        plan = self.plan
        sc = plan.scenario
        rng = random.Random(run_seed)
        budgets = rng.sample(range(1, 1 + 4 * n + 20), n)
        wall0, cpu0 = time.perf_counter(), time.process_time()
        dep = Deployment(plan, strategy, run_seed, root)
        try:
            sim0 = dep.loop.now()
            sent: dict = {}
            agents = []
            try:
                for i, budget in enumerate(budgets):
                    agents.append(spawn_agent(dep.local, Bidder(), initial_bidder_state(budget), f"bidder-{i:04d}"))
            except Exception as exc:
                raise BenchAborted(f"admission failed at n={n}: {exc}") from exc
            launch = (dep.loop.now() - sim0) if plan.clock == "sim" else (time.perf_counter() - wall0)
            cpu = time.process_time() - cpu0
            if record:
                ts = self._now_ms(dep)
                for ev in dep.events:
                    if ev.kind == "register_sent" and not ev.data["recreated"]:
                        sent[ev.data["aid"]] = self._stamp(ev)
                for ev in dep.events:
                    if ev.kind == "ready" and not ev.data["recreated"]:
                        start = sent.pop(ev.data["aid"])
                        self.sink.add(sc, strategy, n, "response_time", (self._stamp(ev) - start) * 1000, ts)
                self.sink.add(sc, strategy, n, "launch_time", launch * 1000, ts)
                if plan.clock == "wall":
                    self.sink.add(sc, strategy, n, "cpu_time", cpu * 1000, ts)
                # let the last sync acks land before counting bytes
                dep.loop.run_for(plan.monitor.sync_timeout)
                self._memory(dep, strategy, n)
            for k in plan.kill_counts:
                if k > n:
                    continue
                self._recreation(dep, strategy, n, k, rng, agents, record)
        finally:
            dep.close()

    def _recreation(self, dep: Deployment, strategy: str, n: int, k: int, rng, agents, record: bool) -> None:
        plan = self.plan
        first = len(dep.events)
        victims = rng.sample(agents, k)
        for aid in victims:
            dep.local.kill(aid)
        pending = set(victims)

        def done():
            while self._cursor < len(dep.events):
                ev = dep.events[self._cursor]
                self._cursor += 1
                if ev.kind == "ready" and ev.data["recreated"]:
                    pending.discard(ev.data["aid"])
                elif ev.kind == "recovery_failed":
                    raise RecoveryFailed(f"{ev.data['aid']}: {ev.data['error']}")
            return not pending

        self._cursor = first
        timeout = 10 * plan.monitor.failure_timeout + 5 * k * plan.monitor.retry_interval + 5.0
        try:
            ok = dep.loop.run_until(done, timeout=timeout)
        except RecoveryFailed as exc:
            raise BenchAborted(str(exc)) from exc
        if not ok:
            raise BenchAborted(f"{len(pending)} of {k} agents not recreated at n={n}")
        if not record:
            return
        killed, detected = {}, {}
        ts = self._now_ms(dep)
        for ev in dep.events[first:]:
            aid = ev.data.get("aid")
            # detection is dominated by the heartbeat timeout, which only the
            # loop clock sees; wall time over simulated waits would be noise
            if ev.kind == "killed":
                killed[aid] = ev.time
            elif ev.kind == "failure_detected" and aid in killed:
                detected[aid] = self._stamp(ev)
                self.sink.add(f"{plan.scenario}/k={k}", strategy, n, "detection_time",
                              (ev.time - killed[aid]) * 1000, ts)
            elif ev.kind == "registered" and ev.data["recreated"] and aid in detected:
                self.sink.add(f"{plan.scenario}/k={k}", strategy, n, "recreation_time",
                              (self._stamp(ev) - detected.pop(aid)) * 1000, ts)


def run_plan(plan: BenchPlan, strategy: str) -> list[MetricSample]:
    return Bench(plan).run(strategy)


def measure_response_time(plan: BenchPlan, strategy: str) -> list[MetricSample]:
    return [s for s in run_plan(plan, strategy) if s.metric == "response_time"]


def measure_recreation_time(plan: BenchPlan, strategy: str, kill_count: int) -> list[MetricSample]:
    plan = BenchPlan(**{**plan.__dict__, "kill_counts": (kill_count,)})
    return [s for s in run_plan(plan, strategy) if s.metric == "recreation_time"]


def measure_memory(plan: BenchPlan, strategy: str) -> list[MetricSample]:
    return [s for s in run_plan(plan, strategy) if s.metric == "memory_bytes"]


# reporting

def sort_samples(samples) -> list[MetricSample]:
    return sorted(samples, key=MetricSample.key)


def to_csv(samples) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for s in sort_samples(samples):
        w.writerow((s.scenario, s.strategy, s.n_agents, s.metric, repr(s.value), s.run_id, s.timestamp_ms))
    return buf.getvalue()


def read_csv(text: str) -> list[MetricSample]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ConfigError("not a samples CSV: header mismatch")
    return [MetricSample(r[0], r[1], int(r[2]), r[3], float(r[4]), int(r[5]), int(r[6])) for r in rows[1:]]


def p95(values) -> float:
    vals = sorted(values)
    if len(vals) == 1:
        return vals[0]
    q = statistics.quantiles(vals, n=20, method="inclusive")[18]
    # interpolating between equal neighbours can round one ulp past them
    return min(max(q, vals[0]), vals[-1])


def summarize(samples) -> list[tuple]:
    groups: dict[tuple, list[float]] = {}
    for s in samples:
        groups.setdefault((s.scenario, s.strategy, s.n_agents, s.metric), []).append(s.value)
    return [(*key, len(v), statistics.median(v), p95(v)) for key, v in sorted(groups.items())]


def summary_table(samples) -> str:
    lines = [f"{'scenario':<16} {'strategy':<7} {'n':>5} {'metric':<16} {'count':>6} {'median':>14} {'p95':>14}"]
    for sc, st, n, metric, count, med, hi in summarize(samples):
        lines.append(f"{sc:<16} {st:<7} {n:>5} {metric:<16} {count:>6} {med:>14.4f} {hi:>14.4f}")
    return "\n".join(lines) + "\n"


def emit_report(samples, out_dir, fmt: str = "csv") -> Path:
    """Write ``samples.csv`` or ``summary.txt`` into ``out_dir``."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out / "samples.csv"
        path.write_text(to_csv(samples), encoding="utf-8")
    elif fmt == "summary":
        path = out / "summary.txt"
        path.write_text(summary_table(samples), encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path
