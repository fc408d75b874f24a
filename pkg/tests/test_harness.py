import csv
import hashlib
import os
import subprocess
import sys
from pathlib import Path

import pytest

from p2posn.harness.cli import default_plan_text, main
from p2posn.harness.plan import PlanError, parse_churn, parse_plan
from p2posn.harness.report import FIGURE_METRICS, HEADER, write_csvs, write_figures
from p2posn.harness.runner import run_plan

SHORT_PLAN = """
warmup 300
gap 10
friends ring
MESSAGING_SEND_MESSAGE 2 1
WALL_POST 2 1
PHOTOS_CREATE_ALBUM 1 1
GROUPS_CREATE_GROUP 1 1
GROUPS_VIEW_GROUP 1 1
"""


def test_builtin_plan_covers_every_action_once():
    plan = parse_plan(default_plan_text())
    names = [s.action for s in plan.steps]
    assert len(names) == len(set(names)) == 36
    assert plan.friends == "ring" and plan.warmup_s == 600


@pytest.mark.parametrize("text", [
    "", "warmup", "warmup x\nWALL_POST 1 1", "friends star\nWALL_POST 1 1",
    "NOT_AN_ACTION 1 1", "WALL_POST 1", "WALL_POST 1.5 1", "WALL_POST 1 0",
])
def test_plan_errors(text):
    with pytest.raises(PlanError):
        parse_plan(text)


def test_churn_grammar():
    ch = parse_churn("# comment\n300 join 2\n60 crash 1\n120 leave 3\n")
    assert [(e.time_s, e.kind, e.count) for e in ch.events] == [(60, "crash", 1), (120, "leave", 3), (300, "join", 2)]
    for bad in ("10 explode 1", "10 crash", "-1 crash 1", "5 crash 0"):
        with pytest.raises(PlanError):
            parse_churn(bad)


@pytest.fixture(scope="module")
def short_run():
    return run_plan(6, parse_plan(SHORT_PLAN), seed=2)


def test_short_run_all_actions_succeed(short_run):
    assert short_run.scheduled == 6 * 7
    assert short_run.success_rate == 1.0
    assert short_run.log.views
    stored, replicas = short_run.imbalance()
    assert stored >= 1.0 and replicas >= 1.0


def test_csvs_and_figures(short_run, tmp_path):
    paths = write_csvs(short_run, tmp_path)
    names = {p.name for p in paths}
    for m in FIGURE_METRICS:
        assert f"{m}.csv" in names
    with open(tmp_path / "GLOBAL_PLUGIN_PHOTOS_CREATEDALBUM.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == HEADER and len(rows) > 1
    figs = write_figures(tmp_path)
    assert len(figs) == len(FIGURE_METRICS)
    assert all(f.stat().st_size > 1000 for f in figs)


def test_cli_run_report_and_oracle(tmp_path, capsys):
    plan = tmp_path / "short.plan"
    plan.write_text(SHORT_PLAN)
    out = tmp_path / "out"
    assert main(["run", "--nodes", "6", "--seed", "2", "--plan", str(plan), "--out", str(out)]) == 0
    assert (out / "actions.csv").exists() and (out / "GLOBAL_NETWORK_MESSAGES_RECEIVED_RATE.png").exists()
    for png in out.glob("*.png"):
        png.unlink()
    assert main(["report", str(out)]) == 0
    assert len(list(out.glob("*.png"))) == len(FIGURE_METRICS)
    assert main(["oracle", "--check", "crypto"]) == 0
    assert main(["oracle", "--check", "pht", "--seeds", "2"]) == 0
    assert main(["report", str(tmp_path / "missing")]) == 64
    assert "PASS" in capsys.readouterr().out


def test_cli_reports_failed_actions_with_exit_code_1(tmp_path):
    plan = tmp_path / "p.plan"
    # voting results are only shown after voting, so a fresh node skips
    plan.write_text("warmup 120\nfriends none\nVOTING_GET_RESULTS 1 1\n")
    assert main(["run", "--nodes", "4", "--plan", str(plan), "--out", str(tmp_path / "o"), "--no-figures"]) == 1


def _digest(outdir: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(outdir.glob("*.csv")):
        h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


def test_byte_identical_csvs_across_processes(tmp_path):
    plan = tmp_path / "short.plan"
    plan.write_text(SHORT_PLAN)
    digests = []
    for i, hashseed in enumerate(("0", "12345")):
        out = tmp_path / f"run{i}"
        env = dict(os.environ, PYTHONHASHSEED=hashseed)
        subprocess.run([sys.executable, "-m", "p2posn", "run", "--nodes", "6", "--seed", "4",
                        "--plan", str(plan), "--out", str(out), "--no-figures"],
                       check=True, env=env, capture_output=True)
        digests.append(_digest(out))
    assert digests[0] == digests[1]
