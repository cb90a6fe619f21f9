"""End-to-end checks of the command-line surface."""

import json

import pytest
from click.testing import CliRunner

from coplan.cli import main
from coplan.domain import bundled_source
from coplan.metrics import FluencyReport, parse_export
from coplan.planner import plan as build_plan
from coplan.sim import load_domain
from coplan.state import new_state


@pytest.fixture()
def runner():
    return CliRunner()


def test_plan_prints_step_count(runner):
    result = runner.invoke(main, ["plan", "--domain", "oddvar"])
    assert result.exit_code == 0
    assert result.stdout.splitlines()[0] == "545 steps"
    assert "planned in" in result.stderr


def test_plan_writes_plan_and_tree(runner, tmp_path):
    out = tmp_path / "plan.json"
    result = runner.invoke(main, ["plan", "--domain", "hutten", "--out", str(out)])
    assert result.exit_code == 0
    doc = json.loads(out.read_text())
    assert doc["domain"] == "hutten"
    assert len(doc["steps"]) == int(result.stdout.split()[0])
    assert doc["steps"][0]["index"] == 0

    def leaves(node):
        if "action" in node:
            return 1
        return sum(leaves(child) for child in node.get("children", ()))

    assert leaves(doc["tree"]) == len(doc["steps"])


def test_plan_accepts_domain_file(runner, tmp_path):
    source = tmp_path / "micro.htn"
    source.write_text(bundled_source("hand_over_micro"))
    result = runner.invoke(main, ["plan", "--domain", str(source)])
    assert result.exit_code == 0
    expected = len(build_plan(load_domain("hand_over_micro"),
                              new_state(load_domain("hand_over_micro").declarations)))
    assert result.stdout.splitlines()[0] == f"{expected} steps"


def test_plan_unknown_domain_fails(runner):
    result = runner.invoke(main, ["plan", "--domain", "wardrobe"])
    assert result.exit_code == 1
    assert "unknown domain" in result.stderr


def test_unknown_flag_is_usage_error(runner):
    result = runner.invoke(main, ["plan", "--domain", "oddvar", "--frobnicate"])
    assert result.exit_code == 2


def test_simulate_writes_identical_logs(runner, tmp_path):
    paths = [tmp_path / "a.ndjson", tmp_path / "b.ndjson"]
    for path in paths:
        result = runner.invoke(
            main,
            ["simulate", "--domain", "kritter", "--seed", "7", "--log", str(path)],
        )
        assert result.exit_code == 0
        assert "goal reached" in result.stdout
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_simulate_stdout_when_no_log_flag(runner):
    result = runner.invoke(
        main, ["simulate", "--domain", "hand_over_micro", "--seed", "3"]
    )
    assert result.exit_code == 0
    first = json.loads(result.stdout.splitlines()[0])
    assert first["schema"] == "coplan.eventlog"


def test_simulate_policy_parameter_reaches_session(runner, tmp_path):
    path = tmp_path / "picker.ndjson"
    result = runner.invoke(
        main,
        [
            "simulate", "--domain", "kritter", "--seed", "7",
            "--policy", "independent_picker:1.0", "--log", str(path),
        ],
    )
    assert result.exit_code == 0
    picks = [
        line for line in path.read_text().splitlines()
        if '"event": "pick"' in line or '"event":"pick"' in line
    ]
    assert picks


def test_simulate_rejects_unknown_policy(runner):
    result = runner.invoke(main, ["simulate", "--domain", "kritter",
                                  "--policy", "chaotic"])
    assert result.exit_code == 2


def test_simulate_rejects_interactive_policy(runner):
    result = runner.invoke(main, ["simulate", "--domain", "kritter",
                                  "--policy", "interactive"])
    assert result.exit_code == 2


def test_metrics_outputs_are_stable_and_roundtrip(runner, tmp_path):
    log_path = tmp_path / "run.ndjson"
    runner.invoke(
        main,
        ["simulate", "--domain", "oddvar", "--seed", "42", "--log", str(log_path)],
    )
    csv_dir = tmp_path / "csv"
    out_path = tmp_path / "report.json"
    results = [
        runner.invoke(
            main,
            [
                "metrics", "--log", str(log_path),
                "--csv", str(csv_dir), "--out", str(out_path),
            ],
        )
        for _ in range(2)
    ]
    assert all(r.exit_code == 0 for r in results)
    assert results[0].stdout == results[1].stdout

    recovered = parse_export((csv_dir / "fluency.csv").read_bytes(), "csv")
    assert isinstance(recovered, FluencyReport)
    report = json.loads(out_path.read_text())
    assert report["fluency"]["robot_idle_pct"] == recovered.robot_idle
    assert report["goal_reached"] is True
    assert (csv_dir / "perception.csv").read_text().startswith("kind,count,mean_s")


def test_metrics_empty_file_fails_with_diagnostic(runner, tmp_path):
    empty = tmp_path / "empty.ndjson"
    empty.write_text("")
    result = runner.invoke(main, ["metrics", "--log", str(empty)])
    assert result.exit_code == 1
    assert "meta line" in result.stderr


def test_metrics_missing_file_fails(runner, tmp_path):
    result = runner.invoke(main, ["metrics", "--log", str(tmp_path / "nope.ndjson")])
    assert result.exit_code == 1


def test_serve_help_does_not_need_web_stack(runner):
    result = runner.invoke(main, ["serve", "--help"])
    assert result.exit_code == 0
    assert "--port" in result.stdout


def test_log_level_environment_variable(runner):
    result = runner.invoke(
        main, ["plan", "--domain", "kritter"], env={"COPLAN_LOG_LEVEL": "debug"}
    )
    assert result.exit_code == 0
