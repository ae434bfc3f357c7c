import csv
import json
import subprocess
import sys

import filelock
import pytest

from mcfvc import runner
from mcfvc.cli import main
from mcfvc.errors import UsageError
from mcfvc.metrics import StepAccuracyTable, forgetting_curve

SMALL = ["--n-classes", "6", "--per-class", "10", "--base-classes", "2", "--per-increment", "2", "--ell", "8",
         "--d2", "6", "--d3", "6", "--hidden", "12", "--d-model", "12", "--epochs", "2", "--beam", "2",
         "--max-len", "8", "--bs", "4"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert main(["run-all", "--run-dir", str(root), *SMALL]) == 0
    return root


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != ".lock"}


class TestRunAll:
    def test_layout(self, run_dir):
        for rel in ["config.json", "data/dataset.jsonl", "data/splits.json", "logs/losses.csv",
                    "results/forgetting_curve.csv", "results/step_scores.csv", "results/summary.json"]:
            assert (run_dir / rel).is_file(), rel
        for t in range(3):
            assert (run_dir / f"checkpoints/step_{t}/checkpoint.json").is_file()
            assert (run_dir / f"results/step_{t}.json").is_file()

    def test_loss_log_columns(self, run_dir):
        with open(run_dir / "logs/losses.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == runner.LOSS_COLUMNS
        assert {int(r["task_index"]) for r in rows} == {0, 1, 2}

    def test_report_reingests(self, run_dir):
        summary = json.loads((run_dir / "results/summary.json").read_text())
        table = StepAccuracyTable.from_csv((run_dir / "results/step_scores.csv").read_text())
        curve = forgetting_curve(table)
        assert {s["step"]: s["cider_tilde"] for s in summary["steps"]} == curve
        first = summary["steps"][0]
        assert first["cider_tilde"] == summary["cider_matrix"][0][0]  # one step: tilde equals base CIDEr

    def test_bit_exact_rerun(self, run_dir, tmp_path):
        assert main(["run-all", "--run-dir", str(tmp_path / "again"), *SMALL]) == 0
        assert tree(run_dir) == tree(tmp_path / "again")

    def test_protocol_audit(self, run_dir):
        cfg = runner.RunDirectory(run_dir).config()
        run = runner.RunDirectory(run_dir)
        loader = runner.TaskDataLoader(run.splits())
        for t in range(3):
            runner.step_records(loader, t, cfg.mode)
        assert loader.tasks_read() == {0: {0}, 1: {1}, 2: {2}}
        ideal = runner.TaskDataLoader(run.splits())
        for t in range(3):
            runner.step_records(ideal, t, "ideal")
        assert ideal.tasks_read() == {0: {0}, 1: {0, 1}, 2: {0, 1, 2}}


class TestSubcommands:
    def test_stepwise_matches_run_all(self, run_dir, tmp_path, capsys):
        data, splits, rd = tmp_path / "d.jsonl", tmp_path / "s.json", tmp_path / "rd"
        assert main(["gen-data", "--out", str(data), *SMALL]) == 0
        assert main(["split", "--data", str(data), "--out", str(splits), *SMALL]) == 0
        assert main(["train-base", "--run-dir", str(rd), "--data", str(data), "--splits", str(splits), *SMALL]) == 0
        assert main(["eval", "--run-dir", str(rd), "--step", "0"]) == 0
        assert main(["train-increment", "--run-dir", str(rd), "--steps", "2"]) == 0
        for t in (1, 2):
            assert main(["eval", "--run-dir", str(rd), "--step", str(t)]) == 0
        assert main(["report", "--run-dir", str(rd)]) == 0
        assert (rd / "results/summary.json").read_bytes() == (run_dir / "results/summary.json").read_bytes()
        assert main(["train-increment", "--run-dir", str(rd)]) == 1  # nothing left

    def test_config_file(self, tmp_path, run_dir):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text((run_dir / "config.json").read_text())
        out = tmp_path / "d.jsonl"
        assert main(["gen-data", "--out", str(out), "--config", str(cfg_path)]) == 0
        assert out.read_bytes() == (run_dir / "data/dataset.jsonl").read_bytes()

    def test_usage_errors(self, tmp_path, capsys):
        assert main(["report", "--run-dir", str(tmp_path / "missing")]) == 1
        (tmp_path / "empty").mkdir()
        assert main(["report", "--run-dir", str(tmp_path / "empty")]) == 1
        assert main(["run-all", "--run-dir", str(tmp_path / "x"), "--sigma", "3"]) == 1
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"sigma": 0.5, "nonsense": 1}))
        assert main(["gen-data", "--out", str(tmp_path / "o"), "--config", str(bad)]) == 1
        with pytest.raises(SystemExit) as e:
            main(["no-such-command"])
        assert e.value.code == 1
        with pytest.raises(SystemExit) as e:
            main(["eval"])
        assert e.value.code == 1

    def test_locked_run_dir_is_contract_error(self, tmp_path):
        root = tmp_path / "locked"
        root.mkdir()
        with filelock.FileLock(str(root / ".lock")):
            code = subprocess.run([sys.executable, "-m", "mcfvc", "run-all", "--run-dir", str(root), *SMALL],
                                  capture_output=True).returncode
        assert code == 2

    def test_reinit_with_other_config_refused(self, run_dir):
        assert main(["train-base", "--run-dir", str(run_dir), *SMALL[:-2], "--bs", "5"]) == 1

    def test_report_on_empty_raises_usage(self, tmp_path):
        with pytest.raises(UsageError):
            runner.report(tmp_path)
