import pytest

from agentmirror import AuctionConfig, make_crash_schedule, run_auction
from agentmirror.auction import bidder_names, derive_budgets, dump_states, parse_scenario
from agentmirror.errors import ConfigError, TooManyKills
from agentmirror.state import decode_snapshot

import oracles

ABC = {"bidder-000": 5, "bidder-001": 9, "bidder-002": 7}


def queue(cfg):
    return [(n, cfg.budgets[n]) for n in bidder_names(cfg.n_bidders)]


@pytest.mark.parametrize("strategy", ["mirror", "store"])
def test_three_bidders(strategy):
    r = run_auction(AuctionConfig(3, budgets=ABC, strategy=strategy))
    assert (r.winner, r.final_price) == ("bidder-001", 8)
    assert (r.winner, r.final_price, r.rounds) == oracles.auction(list(ABC.items()))


def test_single_bidder():
    r = run_auction(AuctionConfig(1, seed=4))
    assert (r.winner, r.final_price, r.rounds) == ("bidder-000", 0, 0)


def test_final_states():
    r = run_auction(AuctionConfig(3, budgets=ABC))
    win = r.per_agent_final_states["bidder-001"]
    assert win["won"] is True and win["last_bid"] == 8 and win["remaining_budget"] == 1
    for name in ("bidder-000", "bidder-002"):
        s = r.per_agent_final_states[name]
        assert s["won"] is False and s["passed"] is True
        assert s["remaining_budget"] == ABC[name] - s["last_bid"]


def test_unit_increment_highest_budget_wins():
    for seed in range(10):
        cfg = AuctionConfig(6, seed=seed)
        r = run_auction(cfg)
        assert r.final_price <= cfg.budgets[r.winner]
        assert cfg.budgets[r.winner] == max(cfg.budgets.values())


def test_coarse_increment_matches_closed_form():
    # budgets 12 and 13 with step 3 both stop at 12; queue order then decides
    for seed in range(10):
        cfg = AuctionConfig(6, seed=seed, increment=3)
        r = run_auction(cfg)
        assert r.final_price <= cfg.budgets[r.winner]
        assert (r.winner, r.final_price) == oracles.auction_closed_form(queue(cfg), 3)


@pytest.mark.parametrize("strategy", ["mirror", "store"])
def test_worker_crash_keeps_winner(strategy):
    base = run_auction(AuctionConfig(5, seed=3, strategy=strategy))
    sched = [(2, "bidder-001", "worker"), (4, "bidder-003", "worker")]
    crashed = run_auction(AuctionConfig(5, seed=3, strategy=strategy, crash_schedule=sched))
    assert (crashed.winner, crashed.final_price, crashed.rounds) == (base.winner, base.final_price, base.rounds)


def test_clone_crash_keeps_winner():
    base = run_auction(AuctionConfig(4, seed=8))
    crashed = run_auction(AuctionConfig(4, seed=8, crash_schedule=[(1, "bidder-000", "clone"),
                                                                   (3, "bidder-002", "clone")]))
    assert (crashed.winner, crashed.final_price) == (base.winner, base.final_price)


def test_remaining_budget_respects_acked_floor():
    cfg = AuctionConfig(4, seed=2, crash_schedule=[(3, "bidder-001", "worker")])
    r = run_auction(cfg)
    for name, s in r.per_agent_final_states.items():
        assert s["remaining_budget"] == cfg.budgets[name] - s["last_bid"]


def test_crash_schedule_is_deterministic():
    a = make_crash_schedule(7, 5, 20, 30)
    assert a == make_crash_schedule(7, 5, 20, 30)
    assert len({name for _, name, _ in a}) == 5
    assert all(1 <= r <= 30 for r, _, _ in a)


def test_too_many_kills():
    with pytest.raises(TooManyKills):
        make_crash_schedule(0, 4, 4, 10)


def test_budgets_distinct():
    b = derive_budgets(11, 50)
    assert len(set(b.values())) == 50 and b == derive_budgets(11, 50)


@pytest.mark.parametrize("kwargs", [
    {"n_bidders": 0},
    {"n_bidders": 2, "increment": 0},
    {"n_bidders": 2, "strategy": "cloud"},
    {"n_bidders": 2, "crash_schedule": [(0, "bidder-000", "worker")]},
    {"n_bidders": 2, "crash_schedule": [(1, "nobody", "worker")]},
    {"n_bidders": 2, "crash_schedule": [(1, "bidder-000", "monitor")]},
    {"n_bidders": 2, "strategy": "store", "crash_schedule": [(1, "bidder-000", "clone")]},
    {"n_bidders": 2, "budgets": {"bidder-000": 3}},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        AuctionConfig(**kwargs)


def test_scenario_file():
    cfg = parse_scenario(
        "n_bidders = 3\nseed = 9\nincrement = 1\nstrategy = mirror\n"
        "budget = bidder-000, 5\nbudget = bidder-001, 9\nbudget = bidder-002, 7\n"
        "crash = 2, bidder-001, worker\ncrash = 3, bidder-002, clone\nlatency_ms = 2\n")
    assert cfg.budgets == ABC and cfg.latency == 0.002
    assert cfg.crash_schedule == [(2, "bidder-001", "worker"), (3, "bidder-002", "clone")]
    r = run_auction(cfg)
    assert (r.winner, r.final_price) == ("bidder-001", 8)


@pytest.mark.parametrize("text", ["seed = 1\n", "n_bidders = 2\nfoo = 1\n", "n_bidders = x\n",
                                  "n_bidders = 2\ncrash = 1,bidder-000\n"])
def test_bad_scenario(text):
    with pytest.raises(ConfigError):
        parse_scenario(text)


def test_dump_is_canonical():
    r = run_auction(AuctionConfig(2, seed=1))
    raw = dump_states(r)
    pos, names = 0, []
    while pos < len(raw):
        n = int.from_bytes(raw[pos:pos + 2], "big")
        name = raw[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        blen = int.from_bytes(raw[pos:pos + 4], "big")
        assert decode_snapshot(raw[pos + 4:pos + 4 + blen]) == r.per_agent_final_states[name]
        pos += 4 + blen
        names.append(name)
    assert names == ["bidder-000", "bidder-001"]


def test_drops_do_not_change_winner():
    base = run_auction(AuctionConfig(5, seed=6))
    lossy = run_auction(AuctionConfig(5, seed=6, drop_rate=0.05,
                                      crash_schedule=[(2, "bidder-004", "worker")]))
    assert (lossy.winner, lossy.final_price) == (base.winner, base.final_price)
