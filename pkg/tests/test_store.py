import os
import random
import struct
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentmirror import (
    Behavior,
    InProcessNetwork,
    LocalState,
    MirrorStrategy,
    Platform,
    PlatformConfig,
    SimLoop,
    StateStore,
    StoreStrategy,
    decode_snapshot,
    encode_snapshot,
    fetch_state,
    persist_state,
    recreate_from_store,
    spawn_agent,
)
from agentmirror.errors import StaleVersion, UnknownAgent
from agentmirror.mirror import FailureEvent
from agentmirror.store import encode_record

import oracles
from conftest import Pair


class Idle(Behavior):
    pass


def single(tmp_path, io_delay=0.0):
    loop = SimLoop()
    store = StateStore(tmp_path / "db")
    net = InProcessNetwork(loop, latency=0.001)
    p = Platform(PlatformConfig("main", port=7001), loop, StoreStrategy(store, io_delay), net)
    return p, store


def test_record_bytes_by_hand():
    blob = b"\x01\x02\x03"
    body = struct.pack(">H", 3) + b"bob" + struct.pack(">QI", 7, 3) + blob
    want = struct.pack(">I", len(body) + 4) + body + struct.pack(">I", zlib.crc32(body))
    assert encode_record("bob", 7, blob) == want


def test_read_your_write(tmp_path):
    with StateStore(tmp_path) as s:
        persist_state(s, "a", b"blob-1", 1)
        assert fetch_state(s, "a") == (b"blob-1", 1)


def test_stale_version(tmp_path):
    with StateStore(tmp_path) as s:
        s.persist_state("a", b"x", 5)
        with pytest.raises(StaleVersion):
            s.persist_state("a", b"y", 3)
        with pytest.raises(StaleVersion):
            s.persist_state("a", b"y", 5)
        s.persist_state("a", b"y", 5, allow_equal=True)
        assert s.fetch_state("a") == (b"y", 5)


def test_unknown(tmp_path):
    with StateStore(tmp_path) as s, pytest.raises(UnknownAgent):
        s.fetch_state("nobody")


def test_latest_of_nine(tmp_path):
    with StateStore(tmp_path) as s:
        for v in range(1, 10):
            s.persist_state("a", f"v{v}".encode(), v)
        assert s.fetch_state("a") == (b"v9", 9)


def test_thousand_agents_survive_reopen(tmp_path):
    # fsync off: reopening within one process checks the index rebuild, not the disk
    with StateStore(tmp_path, shards=4, fsync=False) as s:
        for v in range(1, 101):
            for a in range(1000):
                s.persist_state(f"agent-{a}", f"{a}/{v}".encode(), v)
    with StateStore(tmp_path, shards=4) as s:
        assert len(s.names()) == 1000
        for a in range(1000):
            assert s.fetch_state(f"agent-{a}") == (f"{a}/100".encode(), 100)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcde"), st.integers(0, 50), st.binary(max_size=8)), max_size=60))
def test_random_persists_match_max_oracle(tmp_path_factory, ops):
    path = tmp_path_factory.mktemp("s")
    best = {}
    with StateStore(path, shards=2) as s:
        for name, version, blob in ops:
            cur = best.get(name)
            if cur is not None and version <= cur[0]:
                with pytest.raises(StaleVersion):
                    s.persist_state(name, blob, version)
            else:
                s.persist_state(name, blob, version)
                best[name] = (version, blob)
    with StateStore(path, shards=2) as s:
        assert {n: s.fetch_state(n) for n in s.names()} == {n: (b, v) for n, (v, b) in best.items()}


@pytest.mark.parametrize("cut", [1, 5, 20])
def test_torn_tail_dropped(tmp_path, cut):
    with StateStore(tmp_path) as s:
        s.persist_state("a", b"one", 1)
        s.persist_state("a", b"two-two", 2)
    log = tmp_path / "shard-0.log"
    data = log.read_bytes()
    log.write_bytes(data[:-cut])
    with StateStore(tmp_path) as s:
        assert s.fetch_state("a") == (b"one", 1)
        s.persist_state("a", b"three", 3)
    with StateStore(tmp_path) as s:
        assert s.fetch_state("a") == (b"three", 3)


def test_bad_crc_tail_dropped(tmp_path):
    with StateStore(tmp_path) as s:
        s.persist_state("a", b"one", 1)
        s.persist_state("b", b"two", 1)
    log = tmp_path / "shard-0.log"
    data = bytearray(log.read_bytes())
    data[-6] ^= 0xFF
    log.write_bytes(bytes(data))
    with StateStore(tmp_path) as s:
        assert s.names() == ["a"]
    assert os.path.getsize(log) < len(data)


def test_update_waits_for_flush(tmp_path):
    p, store = single(tmp_path)
    w = p.agents[spawn_agent(p, Idle(), LocalState({"n": 0}), "w")]
    seen = []
    w.update_state({"n": 1}, then=lambda: seen.append(store.version_of("w")))
    assert seen == [1]
    p.close()
    store.close()


def test_io_delay_holds_completion(tmp_path):
    p, store = single(tmp_path, io_delay=0.01)
    w = p.agents[spawn_agent(p, Idle(), LocalState({"n": 0}), "w")]
    seen = []
    w.update_state({"n": 1}, then=lambda: seen.append(p.loop.now()))
    start = p.loop.now()
    p.loop.run_for(0.05)
    assert seen and seen[0] == pytest.approx(start + 0.01)
    p.close()
    store.close()


def test_recreate_after_seven_bids(tmp_path):
    p, store = single(tmp_path)
    mon = p.monitor_agent()
    mon.auto_recover = False
    w = p.agents[spawn_agent(p, Idle(), LocalState({"budget": 50}), "bidder")]
    for i in range(7):
        w.update_state({"last_bid": i + 1})
    failures = []
    p.subscribe(lambda e: e.kind == "failure_detected" and failures.append(e.data["event"]))
    p.kill(w.id)
    p.loop.run_for(0.5)
    aid = recreate_from_store(mon, failures[0])
    new = p.agents[aid]
    assert new.state.version == 7 and new.state["last_bid"] == 7
    assert decode_snapshot(store.fetch_state("bidder")[0]) == new.state
    p.close()
    store.close()


def test_recreate_before_first_persist(tmp_path):
    p, store = single(tmp_path)
    mon = p.monitor_agent()
    w = p.spawn_worker(Idle(), LocalState({"x": 1}), "early")
    p.kill(w.id)  # before the monitor has seen the JOIN
    p.loop.run_for(0.1)
    assert store.version_of("early") is None
    ev = FailureEvent(w.id, "worker", p.loop.now(), None, 0)
    with pytest.raises(UnknownAgent):
        recreate_from_store(mon, ev)
    p.close()
    store.close()


@pytest.mark.parametrize("seed", range(5))
def test_strategies_agree_with_replay(tmp_path, seed):
    rng = random.Random(seed)
    log = [[(rng.choice("abcd"), i)] for i in range(60)]

    def drive(platform, aid, loop):
        w = platform.agents[aid]
        for batch in log:
            w.update_state(dict(batch))
        loop.run_for(0.5)
        return w

    want, version = oracles.replay(log)

    p, store = single(tmp_path)
    p.monitor_agent().auto_recover = False
    w = drive(p, spawn_agent(p, Idle(), LocalState(), "w"), p.loop)
    via_store = decode_snapshot(store.fetch_state("w")[0])
    p.close()
    store.close()

    m = Pair(seed=seed, strategy=MirrorStrategy()).exchange()
    mw = drive(m.local, spawn_agent(m.local, Idle(), LocalState(), "w"), m.loop)
    via_mirror = m.clone_of(mw.id).state
    m.close()

    assert via_store == via_mirror == w.state
    assert via_store.version == version and oracles.same_entries(via_store.to_dict(), want)


def test_snapshot_is_stored_not_diff(tmp_path):
    p, store = single(tmp_path)
    w = p.agents[spawn_agent(p, Idle(), LocalState({"a": 1, "b": 2}), "w")]
    w.update_state({"a": 3})
    assert store.fetch_state("w")[0] == encode_snapshot(LocalState({"a": 3, "b": 2}, 1))
    p.close()
    store.close()
