import pytest

from agentmirror import (
    InProcessNetwork,
    MirrorStrategy,
    MonitorConfig,
    Platform,
    PlatformConfig,
    SimLoop,
    exchange_aids,
)


class Pair:
    """A local and a remote platform on one simulated clock."""

    def __init__(self, seed=0, latency=0.001, monitor=None, strategy=None):
        self.loop = SimLoop()
        self.net = InProcessNetwork(self.loop, latency=latency, seed=seed)
        cfg = monitor or MonitorConfig()
        self.strategy = strategy or MirrorStrategy()
        self.local = Platform(PlatformConfig("local", port=7001, monitor=cfg, seed=seed),
                              self.loop, self.strategy, self.net)
        self.remote = Platform(PlatformConfig("remote", port=7002, monitor=cfg, seed=seed),
                               self.loop, self.strategy, self.net)
        self.events = []
        for p in (self.local, self.remote):
            p.subscribe(self.events.append)

    def exchange(self):
        exchange_aids(self.local, self.remote)
        return self

    def kinds(self, kind):
        return [e for e in self.events if e.kind == kind]

    def worker(self, aid):
        return self.local.agents[aid]

    def clone_of(self, aid):
        b = self.worker(aid).sync.binding
        return self.remote.agents.get(b.clone)

    def settle(self, seconds=2.0):
        self.loop.run_for(seconds)

    def close(self):
        self.local.close()
        self.remote.close()


@pytest.fixture
def pair():
    p = Pair().exchange()
    yield p
    p.close()


_criteria: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not mark.args:
        return
    if report.when == "call" or report.failed:
        detail = dict(item.user_properties).get("detail", "")
        verdict = "PASS" if report.passed else "FAIL"
        if _criteria.get(mark.args[0], ("", "PASS"))[1] == "PASS":
            _criteria[mark.args[0]] = (item.name, verdict, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        name, verdict, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {name}  {detail}")
