import socket

import pytest

from agentmirror import (
    Behavior,
    EnvState,
    LocalState,
    MessageType,
    MonitorConfig,
    Platform,
    PlatformConfig,
    RealLoop,
    Repair,
    Sever,
    StateUpdate,
    exchange_aids,
    kill_agent,
    launch_platform,
    parse_platform_config,
    spawn_agent,
    update_env,
)
from agentmirror.errors import (
    AddressInUse,
    AgentNotRunning,
    ConfigError,
    Disconnected,
    DuplicateName,
    UnknownAgent,
    VersionMismatch,
)
from agentmirror.ids import AgentId
from agentmirror.wire import EnvMode, bid_call

from conftest import Pair


class Recorder(Behavior):
    """Logs what it receives and the environment price it saw at that moment."""

    def __init__(self):
        self.seen = []

    def on_message(self, agent, env):
        self.seen.append((env.msg_type, env.payload, agent.env.get("current_price")))
        if env.msg_type is MessageType.BID_CALL:
            agent.update_state({"calls": agent.state.get("calls", 0) + 1, "last": env.payload})


# config

def test_parse_platform_config():
    cfg = parse_platform_config(
        "# local side\nplatform_name = local\nhost = 127.0.0.1\nport = 7100\nmode = socket\n"
        "heartbeat_interval_ms = 50\nfailure_timeout_ms = 200\nmonitor_shards = 2\n")
    assert (cfg.platform_name, cfg.port, cfg.mode) == ("local", 7100, "socket")
    assert cfg.monitor.heartbeat_interval == 0.05
    assert cfg.monitor.failure_timeout == 0.2
    assert cfg.monitor.shards == 2


def test_default_failure_timeout_is_three_intervals():
    assert MonitorConfig(heartbeat_interval=0.2).failure_timeout == pytest.approx(0.6)


@pytest.mark.parametrize("text", [
    "platform_name = a\ncolour = red\n",
    "platform_name = a\nport = 1\nport = 2\n",
    "platform_name = a\nport = many\n",
    "platform_name = a\nmode = carrier-pigeon\n",
    "platform_name = a\nheartbeat_interval_ms = 100\nfailure_timeout_ms = 100\n",
    "platform_name = a\nmonitor_shards = 0\n",
    "port = 7000\n",
    "platform_name a\n",
])
def test_bad_platform_config(text):
    with pytest.raises(ConfigError):
        parse_platform_config(text)


# launch and AID exchange

def test_exchange_aids():
    p = Pair()
    exchange_aids(p.local, p.remote)
    assert p.local.peer_monitors == (p.remote.monitor,)
    assert p.remote.peer_monitors == (p.local.monitor,)
    exchange_aids(p.local, p.remote)
    assert p.local.peer_monitors == (p.remote.monitor,)
    p.close()


def test_worker_learns_remote_monitor(pair):
    aid = spawn_agent(pair.local, Recorder(), LocalState({"budget": 100}))
    assert pair.worker(aid).remote_monitor == pair.remote.monitor


def test_exchange_over_severed_link_then_retry():
    p = Pair()
    p.local.endpoint.inject_fault(Sever())
    with pytest.raises(Disconnected):
        exchange_aids(p.local, p.remote, timeout=1.0)
    p.local.endpoint.inject_fault(Repair())
    exchange_aids(p.local, p.remote)
    assert p.local.peer_monitors
    p.close()


def test_sharded_monitors():
    p = launch_platform(PlatformConfig("local", monitor=MonitorConfig(shards=4)))
    monitors = [r for r in p.registry.values() if r.role == "monitor"]
    assert len(monitors) == 4 and all(r.status == "running" for r in monitors)
    p.close()


def test_workers_hash_across_shards():
    p = Pair(monitor=MonitorConfig(shards=4)).exchange()
    aids = [spawn_agent(p.local, Recorder(), name=f"w{i}") for i in range(40)]
    owners = {p.local.registry[a].supervisor for a in aids}
    assert len(owners) == 4
    p.close()


def test_duplicate_address():
    p = Pair()
    with pytest.raises(AddressInUse):
        Platform(PlatformConfig("local", port=7001), p.loop, network=p.net)
    p.close()


def test_env_starts_empty():
    p = launch_platform(PlatformConfig("solo"))
    assert p.env_state == EnvState() and p.env_state.version == 0
    p.close()


# spawning and killing

def test_spawn_echo(pair):
    aid = spawn_agent(pair.local, Recorder(), LocalState({"budget": 100}), "bidder")
    rec = pair.local.registry[aid]
    assert (rec.role, rec.status) == ("worker", "running")
    assert rec.state == LocalState({"budget": 100}, 0)


def test_spawn_duplicate(pair):
    spawn_agent(pair.local, Recorder(), name="x")
    with pytest.raises(DuplicateName):
        spawn_agent(pair.local, Recorder(), name="x")


def test_spawn_thousand(pair):
    for i in range(1000):
        spawn_agent(pair.local, Recorder(), LocalState({"budget": i}), f"b{i}")
    assert len(pair.local.registry) == 1001
    assert pair.local.count("worker", "running") == 1000
    assert pair.remote.count("clone", "running") == 1000


def test_kill_drops_traffic(pair):
    rec_b = Recorder()
    aid = spawn_agent(pair.local, rec_b, name="victim")
    pair.local.monitor_agent().auto_recover = False
    kill_agent(pair.local, aid)
    assert pair.local.registry[aid].status == "dead"
    before = pair.local.dropped
    pair.local.monitor_agent().send(MessageType.BID_CALL, aid, bid_call(1, 0, 1))
    pair.settle(0.05)
    assert rec_b.seen == [] and pair.local.dropped > before


def test_kill_unknown(pair):
    with pytest.raises(UnknownAgent):
        kill_agent(pair.local, AgentId("ghost", pair.local.address))


def test_kill_twice(pair):
    aid = spawn_agent(pair.local, Recorder())
    pair.local.monitor_agent().auto_recover = False
    kill_agent(pair.local, aid)
    with pytest.raises(AgentNotRunning):
        kill_agent(pair.local, aid)


def test_registry_matches_liveness(pair):
    aids = [spawn_agent(pair.local, Recorder(), name=f"w{i}") for i in range(10)]
    for aid in aids[:3]:
        kill_agent(pair.local, aid)
    pair.settle(3.0)
    assert pair.local.quiescent()
    for p in (pair.local, pair.remote):
        for rec in p.registry.values():
            assert (rec.status == "running") == rec.agent.alive


# environment

def test_env_broadcast_before_next_call(pair):
    recs = [Recorder() for _ in range(3)]
    aids = [spawn_agent(pair.local, r, name=f"b{i}") for i, r in enumerate(recs)]
    mon = pair.local.monitor_agent()
    update_env(mon, StateUpdate({"current_price": 10}, 0))
    for aid in aids:
        mon.send(MessageType.BID_CALL, aid, bid_call(1, 10, 1))
    pair.settle(0.05)
    assert [r.seen[0][2] for r in recs] == [10, 10, 10]


def test_env_requests_serialize(pair):
    a = pair.worker(spawn_agent(pair.local, Recorder(), name="a"))
    b = pair.worker(spawn_agent(pair.local, Recorder(), name="b"))
    replies = []
    a.request_env_update(StateUpdate({"x": 1}, 0), EnvMode.APPEND, lambda ok, v: replies.append(("a", ok, v)))
    b.request_env_update(StateUpdate({"y": 2}, 0), EnvMode.APPEND, lambda ok, v: replies.append(("b", ok, v)))
    pair.settle(0.05)
    assert replies == [("a", True, 1), ("b", True, 2)]
    assert pair.local.env_state == EnvState({"x": 1, "y": 2}, 2)
    assert a.env == b.env == pair.local.env_state


def test_env_stale_cas_refused(pair):
    a = pair.worker(spawn_agent(pair.local, Recorder(), name="a"))
    update_env(pair.local.monitor_agent(), StateUpdate({"p": 1}, 0))
    replies = []
    a.request_env_update(StateUpdate({"p": 5}, 0), EnvMode.CAS, lambda ok, v: replies.append((ok, v)))
    pair.settle(0.05)
    assert replies == [(False, 1)]
    with pytest.raises(VersionMismatch):
        update_env(pair.local.monitor_agent(), StateUpdate({"p": 2}, 0))


# determinism of the agent loop

def _trace_run():
    p = Pair(seed=9).exchange()
    r = Recorder()
    aid = spawn_agent(p.local, r, LocalState({"calls": 0}), "w")
    mon = p.local.monitor_agent()
    for i in range(20):
        mon.send(MessageType.BID_CALL, aid, bid_call(i, i * 3, 1))
    p.settle(0.5)
    state = p.worker(aid).state
    p.close()
    return r.seen, state


def test_replay_gives_same_state():
    seen1, s1 = _trace_run()
    seen2, s2 = _trace_run()
    assert seen1 == seen2 and s1 == s2 and s1["calls"] == 20


# socket deployment

def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_socket_platforms_end_to_end():
    loop = RealLoop()
    local = launch_platform(PlatformConfig("local", port=_free_port(), mode="socket"), loop=loop)
    remote = launch_platform(PlatformConfig("remote", port=_free_port(), mode="socket"), loop=loop)
    try:
        exchange_aids(local, remote)
        r = Recorder()
        aid = spawn_agent(local, r, LocalState({"budget": 3}), "sock", timeout=10)
        worker = local.agents[aid]
        worker.update_state({"budget": 4})
        assert loop.run_until(lambda: worker.sync.binding.last_acked_version == 1, timeout=10)
        clone = remote.agents[worker.sync.binding.clone]
        assert clone.state == worker.state
        with pytest.raises(AddressInUse):
            launch_platform(PlatformConfig("dup", port=local.address.port, mode="socket"), loop=loop)
    finally:
        local.close()
        remote.close()
