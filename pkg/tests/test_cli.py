import json

import pytest

from foa.cli import main
from foa.scenario import Scenario, ScenarioError, load_scenario, run_scenario


def test_run_smoke(capsys, tmp_path):
    assert main(["run", "smoke", "--report-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "job-1" in out and "Done" in out
    report = json.loads((tmp_path / "job-1.json").read_text())
    assert report["status"] == "Done"


def test_run_infeasible_exit_1(capsys):
    assert main(["run", "infeasible"]) == 1


def test_bad_file_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"agents": [\n  {"agent_id": 3}\n')
    assert main(["run", str(bad)]) == 2
    assert f"{bad}:" in capsys.readouterr().err


def test_schema_error_location(tmp_path):
    bad = tmp_path / "s.json"
    bad.write_text(json.dumps({"agents": [{"agent_id": 3}], "tasks": []}))
    with pytest.raises(ScenarioError) as exc:
        load_scenario(str(bad))
    assert exc.value.location.endswith("agents[0].agent_id")


def test_missing_file_exit_2(capsys):
    assert main(["run", "/nonexistent/scenario.json"]) == 2


def test_seed_changes_answer_not_counts():
    sc = load_scenario("smoke")
    a = run_scenario(sc, seed=1).reports[0]
    b = run_scenario(sc, seed=99).reports[0]
    assert a.answer != b.answer
    assert sum(a.message_counts.values()) == sum(b.message_counts.values())


def test_timeout_flag(capsys):
    assert main(["run", "smoke", "--timeout-ms", "5000"]) == 0


def test_env_override_applied(monkeypatch, capsys):
    monkeypatch.setenv("FOE_DECOMP_MAX_AGENTS", "1")
    assert main(["run", "smoke"]) == 0


def test_roundtrip_identical_reports(tmp_path):
    sc = load_scenario("smoke")
    again = Scenario.from_json(sc.to_json())
    assert again == sc
    r1 = [r.to_dict() for r in run_scenario(sc).reports]
    r2 = [r.to_dict() for r in run_scenario(again).reports]
    assert r1 == r2


@pytest.mark.parametrize("mode,expected_col", [("consensus", "draft_deliveries"), ("clustering", "entries"),
                                               ("routing", "score_evals")])
def test_bench(capsys, mode, expected_col):
    assert main(["bench", mode, "--sizes", "2,3,4"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert expected_col in lines[0] and len(lines) == 4
    assert len({len(line) for line in lines}) == 1


def test_bench_counts():
    from foa.bench import bench
    for row in bench("consensus", [2, 3, 4]):
        assert row["draft_deliveries"] == row["expected"]
    for row in bench("clustering", [4, 8, 16]):
        assert row["entries"] == row["expected"]


def test_bad_sizes():
    with pytest.raises(SystemExit):
        main(["bench", "routing", "--sizes", "a,b"])
