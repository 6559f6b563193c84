import csv
import subprocess
import sys

import pytest

from drtune import experiments as E
from drtune.cli import main
from drtune.config import loads

TINY = """
dataset.n = 256
dataset.res = 8
schedule.T = 10
schedule.beta_start = 0.001
schedule.beta_end = 0.3
pretrain.iters = 150
pretrain.hidden = 32
pretrain.depth = 2
reward.classifier_iters = 30
tune.batch = 4
tune.lr = 0.001
lora.rank = 4
budget.iterations = 4
report.eval_n = 8
report.dump_n = 4
report.timing = none
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.txt"
    cfg.write_text(TINY + f"out = {root / 'pre'}\npretrain.checkpoint = {root / 'pre' / 'model.drtl'}\n")
    assert main(["pretrain", "--config", str(cfg)]) == 0
    return root, cfg


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pretrain_artifacts(workspace):
    root, _ = workspace
    for name in ("model.drtl", "classifier.drtl", "pretrain_loss.csv", "pretrain_loss.svg", "samples.pgm",
                 "dataset.pgm", "config.txt"):
        assert (root / "pre" / name).exists(), name


def test_tune_is_byte_reproducible(workspace):
    root, cfg = workspace
    assert main(["tune", "--config", str(cfg), "--out", str(root / "t1")]) == 0
    assert main(["tune", "--config", str(cfg), "--out", str(root / "t2")]) == 0
    a = (root / "t1" / "metrics.csv").read_bytes()
    assert a == (root / "t2" / "metrics.csv").read_bytes()
    assert a.splitlines()[0] == b"iter,reward,grad_norm,wall_ms"
    assert len(a.splitlines()) == 1 + 4
    for name in ("summary.csv", "reward.svg", "grad_norm.svg", "adapter.drtl", "samples_tuned.pgm"):
        assert (root / "t1" / name).exists(), name
    assert main(["tune", "--config", str(cfg), "--out", str(root / "t3"), "--seed", "5"]) == 0
    assert (root / "t3" / "metrics.csv").read_bytes() != a


def test_compare_runs_all_five(workspace):
    root, cfg = workspace
    assert main(["compare", "--config", str(cfg), "--out", str(root / "cmp")]) == 0
    rows = _rows(root / "cmp" / "summary.csv")
    assert [r["run"] for r in rows] == ["drtune", "draft_1", "draft_lv", "refl", "alignprop"]
    assert all(r["iterations"] == "4" for r in rows)
    for r in rows:
        assert len(_rows(root / "cmp" / r["run"] / "metrics.csv")) == 4


def test_compare_wall_budget_fairness(workspace):
    root, _ = workspace
    text = TINY.replace("report.timing = none", "report.timing = wall")
    cfg = loads(text + f"out = {root / 'wall'}\npretrain.checkpoint = {root / 'pre' / 'model.drtl'}\n"
                "budget.mode = wall\nbudget.seconds = 0.4\n")
    result = E.cmd_compare(cfg)
    for row in result["rows"]:
        wall = [float(r["wall_ms"]) for r in _rows(root / "wall" / row["run"] / "metrics.csv")]
        # the loop checks the clock before each step, so only the last step may cross the line
        assert sum(wall[:-1]) / 1e3 < 0.4


def test_ablate_parallel_matches_serial(workspace, monkeypatch):
    root, cfg = workspace
    monkeypatch.setenv("DRTUNE_THREADS", "1")
    assert main(["ablate", "--config", str(cfg), "--axis", "m", "--out", str(root / "ab1")]) == 0
    monkeypatch.setenv("DRTUNE_THREADS", "2")
    assert main(["ablate", "--config", str(cfg), "--axis", "m", "--out", str(root / "ab2")]) == 0
    s1, s2 = _rows(root / "ab1" / "summary.csv"), _rows(root / "ab2" / "summary.csv")
    assert s1 == s2
    assert [r["ratio"] for r in s1] == ["0.1", "0.2", "0.4", "0.6", "0.8"]
    assert (root / "ab1" / "ablation_m.svg").exists()


def test_max_workers_env(monkeypatch):
    monkeypatch.setenv("DRTUNE_THREADS", "3")
    assert E.max_workers(10) == 3 and E.max_workers(2) == 2
    monkeypatch.setenv("DRTUNE_THREADS", "junk")
    assert E.max_workers(1) == 1


def test_exit_codes(workspace, tmp_path, capsys):
    root, cfg = workspace
    bad = tmp_path / "bad.txt"
    bad.write_text("tune.nope = 1\n")
    assert main(["tune", "--config", str(bad)]) == 1
    assert main(["tune", "--config", str(tmp_path / "missing.txt")]) == 1
    assert main(["launch", "--config", str(cfg)]) == 1
    assert main(["tune", "--config", str(cfg), "--budget-seconds", "-1"]) == 1
    nock = tmp_path / "nock.txt"
    nock.write_text(TINY + f"pretrain.checkpoint = {tmp_path / 'none.drtl'}\nout = {tmp_path / 'o'}\n")
    assert main(["compare", "--config", str(nock)]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_unwritable_output_is_runtime_error(workspace, tmp_path):
    root, cfg = workspace
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["tune", "--config", str(cfg), "--out", str(blocker / "x")]) == 2


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "drtune.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "pretrain" in proc.stdout
