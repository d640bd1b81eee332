import pytest

from agentmirror import cli
from agentmirror.bench import CSV_HEADER, Bench, BenchPlan, read_csv
from agentmirror.errors import BenchAborted


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_auction_command(tmp_path, capsys):
    sc = write(tmp_path, "s.txt", "n_bidders = 3\nbudget = bidder-000,5\nbudget = bidder-001,9\n"
                                  "budget = bidder-002,7\ncrash = 2,bidder-001,worker\n")
    dump = tmp_path / "states.bin"
    assert cli.main(["auction", "--scenario", str(sc), "--dump", str(dump)]) == 0
    assert capsys.readouterr().out.strip() == "winner=bidder-001 final_price=8 rounds=8"
    assert dump.stat().st_size > 0


def test_run_and_report(tmp_path, capsys):
    plan = write(tmp_path, "plan.txt", "agent_counts = 4\nrepetitions = 3\nwarmup = 0\nclock = sim\n")
    out = tmp_path / "out"
    assert cli.main(["run", "--plan", str(plan), "--strategy", "store", "--out", str(out)]) == 0
    text = (out / "samples.csv").read_text()
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    assert (out / "summary.txt").exists()
    capsys.readouterr()
    assert cli.main(["report", "--in", str(out), "--format", "summary"]) == 0
    assert "response_time" in capsys.readouterr().out
    assert cli.main(["report", "--in", str(out), "--format", "csv"]) == 0
    assert read_csv((out / "samples.csv").read_text())


@pytest.mark.parametrize("argv", [
    [], ["fly"], ["run", "--strategy", "mirror"], ["run", "--strategy", "nope", "--out", "x"],
    ["report", "--in", "x", "--format", "pdf"],
])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(argv)
    assert ei.value.code == 1


def test_bad_files_exit_1(tmp_path, capsys):
    assert cli.main(["auction", "--scenario", str(tmp_path / "missing")]) == 1
    bad = write(tmp_path, "bad.txt", "n_bidders = 3\nwhat = 1\n")
    assert cli.main(["auction", "--scenario", str(bad)]) == 1
    plan = write(tmp_path, "plan.txt", "repetitions = 1\n")
    assert cli.main(["run", "--plan", str(plan), "--strategy", "mirror", "--out", str(tmp_path)]) == 1


def test_abort_exits_2(tmp_path, monkeypatch, capsys):
    def boom(self, strategy):
        raise BenchAborted("platform fell over")

    monkeypatch.setattr(Bench, "run", boom)
    assert cli.main(["run", "--strategy", "mirror", "--out", str(tmp_path)]) == 2
    assert "aborted" in capsys.readouterr().err


def test_transport_override(tmp_path, monkeypatch):
    seen = {}

    def fake(self, strategy):
        seen["plan"] = self.plan
        from agentmirror.bench import MetricSample
        return [MetricSample("b", strategy, 1, "launch_time", 1.0, 0, 0)]

    monkeypatch.setattr(Bench, "run", fake)
    assert cli.main(["run", "--strategy", "mirror", "--transport", "socket", "--out", str(tmp_path)]) == 0
    assert seen["plan"].transport == "socket" and seen["plan"].agent_counts == BenchPlan().agent_counts
