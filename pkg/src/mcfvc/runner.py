"""
Run-directory driver for the sequential protocol.

Layout of a run directory::

    config.json                  ExperimentConfig
    data/dataset.jsonl           records (one JSON object per line)
    data/splits.json             task → class ids and train/valid/test video ids
    checkpoints/step_<t>/        checkpoint after task t (t = 0 is the base task)
    logs/losses.csv              task_index, epoch, batch, l_vc, l_style, l_c, l_total
    results/step_<t>.json        evaluation over tasks 0..t after step t
    results/step_scores.csv      task_step, sub_task, class_count, cider (1-based)
    results/forgetting_curve.csv step, task_index, cider_tilde, bleu4, rouge_l, meteor_lite, cider_d
    results/summary.json         curve, pooled metrics and the per-task CIDEr matrix

Only one process may write a run directory at a time (``.lock``).
"""

from __future__ import annotations

import csv
import json
import logging
import re
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import filelock

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (DatasetRecord, TaskDataLoader, TaskSplit, generate_synthetic_dataset, load_jsonl, save_jsonl,
                   split_class_incremental, splits_from_json, splits_to_json)
from .errors import ConfigurationError, ContractError, UsageError
from .metrics import StepAccuracyTable, forgetting_curve
from .training import (ExperimentConfig, StepEvaluation, StepLosses, evaluate_all_tasks, train_base,
                       train_increment)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["task_index", "epoch", "batch", "l_vc", "l_style", "l_c", "l_total"]
CURVE_COLUMNS = ["step", "task_index", "cider_tilde", "bleu4", "rouge_l", "meteor_lite", "cider_d"]
METRICS = ("bleu4", "rouge_l", "meteor_lite", "cider_d")

_STEP_RE = re.compile(r"^step_(\d+)(?:\.json)?$")


def make_dataset(cfg: ExperimentConfig) -> list[DatasetRecord]:
    return generate_synthetic_dataset(cfg.n_classes, cfg.per_class, cfg.ell, cfg.d2, cfg.d3, seed=cfg.seed,
                                      skew=cfg.skew)


def make_splits(cfg: ExperimentConfig, dataset: Sequence[DatasetRecord]) -> list[TaskSplit]:
    return split_class_incremental(dataset, cfg.base_classes, cfg.per_increment, seed=cfg.seed)


class RunDirectory:
    def __init__(self, root):
        self.root = Path(root)

    config_path = property(lambda self: self.root / "config.json")
    data_path = property(lambda self: self.root / "data" / "dataset.jsonl")
    splits_path = property(lambda self: self.root / "data" / "splits.json")
    losses_path = property(lambda self: self.root / "logs" / "losses.csv")
    results_dir = property(lambda self: self.root / "results")

    def checkpoint_dir(self, t: int) -> Path:
        return self.root / "checkpoints" / f"step_{t}"

    def result_path(self, t: int) -> Path:
        return self.results_dir / f"step_{t}.json"

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        lk = filelock.FileLock(str(self.root / ".lock"))
        try:
            lk.acquire(timeout=0)
        except filelock.Timeout:
            raise ContractError(f"run directory {self.root} is locked by another process") from None
        try:
            yield self
        finally:
            lk.release()

    @staticmethod
    def _indices(folder: Path) -> list[int]:
        if not folder.is_dir():
            return []
        return sorted(int(m.group(1)) for p in folder.iterdir() if (m := _STEP_RE.match(p.name)))

    def trained_steps(self) -> list[int]:
        return [t for t in self._indices(self.root / "checkpoints")
                if (self.checkpoint_dir(t) / "checkpoint.json").exists()]

    def evaluated_steps(self) -> list[int]:
        return self._indices(self.results_dir)

    # -- loading -------------------------------------------------------------
    def require_initialised(self) -> None:
        if not self.config_path.exists():
            raise UsageError(f"{self.root} is not an initialised run directory (no config.json)")

    def config(self) -> ExperimentConfig:
        self.require_initialised()
        return ExperimentConfig.load(self.config_path)

    def dataset(self) -> list[DatasetRecord]:
        return load_jsonl(self.data_path)

    def splits(self, dataset: Sequence[DatasetRecord] | None = None) -> list[TaskSplit]:
        if dataset is None:
            dataset = self.dataset()
        return splits_from_json(json.loads(self.splits_path.read_text()), dataset)

    def checkpoint(self, t: int) -> Checkpoint:
        path = self.checkpoint_dir(t)
        if not (path / "checkpoint.json").exists():
            raise UsageError(f"no checkpoint for step {t} in {self.root}")
        return load_checkpoint(path)


# ---------------------------------------------------------------------------
# loss log
# ---------------------------------------------------------------------------

class LossLog:
    """Appends per-batch losses; starting task t drops any stale rows for tasks >= t."""

    def __init__(self, path: Path, task: int):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if path.exists():
            with open(path, newline="") as fh:
                kept = [r for r in csv.DictReader(fh) if int(r["task_index"]) < task]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, LOSS_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(kept)

    def __call__(self, task: int, epoch: int, batch: int, parts: StepLosses) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [task, epoch, batch, repr(parts.l_vc), repr(parts.l_style), repr(parts.l_c), repr(parts.l_total)])


# ---------------------------------------------------------------------------
# protocol steps
# ---------------------------------------------------------------------------

def init_run(root, cfg: ExperimentConfig, dataset: Sequence[DatasetRecord] | None = None,
             splits: Sequence[TaskSplit] | None = None) -> RunDirectory:
    """Write config, dataset and splits. Re-initialising with a different config is refused."""
    run = RunDirectory(root)
    if run.config_path.exists():
        if ExperimentConfig.load(run.config_path) != cfg:
            raise ConfigurationError(f"{run.root} already holds a different config")
    run.root.mkdir(parents=True, exist_ok=True)
    cfg.save(run.config_path)
    if dataset is None:
        dataset = run.dataset() if run.data_path.exists() else make_dataset(cfg)
    if splits is None:
        splits = make_splits(cfg, dataset)
    run.data_path.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(dataset, run.data_path)
    run.splits_path.write_text(json.dumps(splits_to_json(splits)))
    return run


def step_records(loader: TaskDataLoader, t: int, mode: str) -> list[DatasetRecord]:
    """Training data for step t: the new task, or every seen task in ideal mode."""
    loader.open_step(t)
    if mode == "ideal" and t > 0:
        return [r for g in range(t + 1) for r in loader.train(g)]
    return loader.train(t)


def run_train_base(run: RunDirectory, loader: TaskDataLoader | None = None) -> Checkpoint:
    cfg = run.config()
    loader = loader or TaskDataLoader(run.splits())
    res = train_base(cfg, step_records(loader, 0, cfg.mode), logger=LossLog(run.losses_path, 0))
    save_checkpoint(res.checkpoint, run.checkpoint_dir(0))
    log.info("base task trained, final epoch loss %.4f", res.epoch_losses[-1] if res.epoch_losses else float("nan"))
    return res.checkpoint


def run_train_increment(run: RunDirectory, loader: TaskDataLoader | None = None) -> Checkpoint:
    """Train the task after the latest checkpoint."""
    cfg = run.config()
    done = run.trained_steps()
    if not done:
        raise UsageError("no base checkpoint; run train-base first")
    prev = run.checkpoint(done[-1])
    splits = None if loader is not None else run.splits()
    loader = loader or TaskDataLoader(splits)
    t = prev.task_index + 1
    if t >= len(loader.splits):
        raise UsageError(f"all {len(loader.splits)} tasks are already trained")
    res = train_increment(cfg, prev, step_records(loader, t, cfg.mode), logger=LossLog(run.losses_path, t))
    save_checkpoint(res.checkpoint, run.checkpoint_dir(t))
    log.info("task %d trained, final epoch loss %.4f", t, res.epoch_losses[-1] if res.epoch_losses else float("nan"))
    return res.checkpoint


def run_eval(run: RunDirectory, t: int | None = None, loader: TaskDataLoader | None = None) -> StepEvaluation:
    cfg = run.config()
    if t is None:
        done = run.trained_steps()
        if not done:
            raise UsageError("nothing to evaluate; no checkpoints")
        t = done[-1]
    loader = loader or TaskDataLoader(run.splits())
    z = [s.spec.z for s in loader.splits]
    ev = evaluate_all_tasks(run.checkpoint(t), loader, z, cfg)
    run.results_dir.mkdir(parents=True, exist_ok=True)
    run.result_path(t).write_text(json.dumps(ev.to_dict(), indent=1, sort_keys=True))
    log.info("step %d evaluated: per-task CIDEr-D %s", t, [round(c, 3) for c in ev.per_task_cider])
    return ev


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _load_results(run: RunDirectory) -> list[dict]:
    steps = run.evaluated_steps()
    if not steps:
        raise UsageError(f"{run.root} has no evaluated steps to report")
    return [json.loads(run.result_path(t).read_text()) for t in steps]


def report(root) -> dict:
    """Write step_scores.csv, forgetting_curve.csv and summary.json; return the summary.

    The summary's curve is checked against a re-ingestion of step_scores.csv.
    """
    run = RunDirectory(root)
    results = _load_results(run)
    counts = max((r["class_counts"] for r in results), key=len)
    if run.splits_path.exists():
        counts = [len(t["class_ids"]) for t in json.loads(run.splits_path.read_text())["tasks"]]
    table = StepAccuracyTable(counts)
    for r in results:
        table.set_row(r["task_index"] + 1, r["per_task_cider"])
    curve = forgetting_curve(table)

    steps = []
    for r in results:
        step = r["task_index"] + 1
        pooled = {k: r["report"][k] for k in METRICS}
        steps.append({"step": step, "task_index": r["task_index"], "cider_tilde": curve[step], **pooled})
    matrix = [[table.scores[t].get(g) for g in range(1, table.t_max + 1)] for t in table.steps()]
    summary = {"class_counts": counts, "steps": steps, "cider_matrix": matrix,
               "final": steps[-1] if steps else None}

    run.results_dir.mkdir(parents=True, exist_ok=True)
    scores_csv = table.to_csv()
    (run.results_dir / "step_scores.csv").write_text(scores_csv)
    with open(run.results_dir / "forgetting_curve.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, CURVE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for s in steps:
            w.writerow({k: (repr(s[k]) if isinstance(s[k], float) else s[k]) for k in CURVE_COLUMNS})
    (run.results_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))

    again = forgetting_curve(StepAccuracyTable.from_csv(scores_csv))
    if again != {s["step"]: s["cider_tilde"] for s in steps}:
        raise ContractError("step_scores.csv does not reproduce the summary curve")
    return summary


def run_all(root, cfg: ExperimentConfig, dataset: Sequence[DatasetRecord] | None = None) -> dict:
    """Initialise, train and evaluate every task in order, then report."""
    run = RunDirectory(root)
    with run.lock():
        init_run(root, cfg, dataset)
        loader = TaskDataLoader(run.splits())
        run_train_base(run, loader)
        run_eval(run, 0, loader)
        for t in range(1, len(loader.splits)):
            run_train_increment(run, loader)
            run_eval(run, t, loader)
        return report(root)
