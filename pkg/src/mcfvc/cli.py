"""
Command-line interface.

    mcfvc gen-data --out data.jsonl [--n-classes 20 --per-class 30 --seed 0 ...]
    mcfvc split --data data.jsonl --out splits.json [--base-classes 10 --per-increment 2]
    mcfvc train-base --run-dir runs/a [--data data.jsonl] [--splits splits.json] [config flags]
    mcfvc train-increment --run-dir runs/a [--steps 1]
    mcfvc eval --run-dir runs/a [--step t]
    mcfvc report --run-dir runs/a
    mcfvc run-all --run-dir runs/a [--data data.jsonl] [config flags]

Every ExperimentConfig field has a flag (``--kappa``, ``--freeze-lstm false``, ...).
``--config file.json`` supplies a base config holding exactly those keys; flags
override it. Without ``--config`` the ``--preset`` (desk by default) is the base.

Exit codes: 0 success, 1 usage error, 2 contract or training error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing

from . import runner
from .data import load_jsonl, save_jsonl, splits_from_json, splits_to_json
from .errors import ConfigurationError, MCFVCError, UsageError
from .training import ExperimentConfig, desk_config

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment config")
    g.add_argument("--config", help="JSON file with ExperimentConfig keys")
    g.add_argument("--preset", choices=("desk", "default"), default="desk",
                   help="base config when --config is absent (desk raises lr for the synthetic set)")
    hints = typing.get_type_hints(ExperimentConfig)
    for f in dataclasses.fields(ExperimentConfig):
        kind = hints[f.name]
        conv = _bool if kind is bool else kind
        g.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", type=conv, default=None,
                       metavar=f.name.upper())


def config_from_args(args) -> ExperimentConfig:
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
        if not isinstance(base, dict):
            raise ConfigurationError(f"{args.config} must hold a JSON object")
        base = ExperimentConfig.from_dict(base).to_dict()
    else:
        base = (desk_config() if args.preset == "desk" else ExperimentConfig()).to_dict()
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            base[f.name] = v
    return ExperimentConfig.from_dict(base)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mcfvc", description="Class-incremental video captioning experiments on synthetic data.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset as JSON lines")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("split", help="class-incremental task split of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("train-base", help="initialise a run directory and train the base task")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", help="dataset JSONL (generated from the config when omitted)")
    p.add_argument("--splits", help="splits JSON (computed from the config when omitted)")
    _add_config_flags(p)

    p = sub.add_parser("train-increment", help="train the next task(s) from the latest checkpoint")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--steps", type=int, default=1)

    p = sub.add_parser("eval", help="evaluate a checkpoint on every task seen so far")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--step", type=int, help="task index of the checkpoint (latest when omitted)")

    p = sub.add_parser("report", help="forgetting curve and summary from evaluated steps")
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("run-all", help="full protocol: base, every increment, evaluation, report")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", help="dataset JSONL (generated from the config when omitted)")
    _add_config_flags(p)
    return ap


def _dispatch(args) -> None:
    cmd = args.command
    if cmd == "gen-data":
        cfg = config_from_args(args)
        recs = runner.make_dataset(cfg)
        save_jsonl(recs, args.out)
        print(f"wrote {len(recs)} records to {args.out}")
    elif cmd == "split":
        cfg = config_from_args(args)
        splits = runner.make_splits(cfg, load_jsonl(args.data))
        with open(args.out, "w") as fh:
            json.dump(splits_to_json(splits), fh)
        for s in splits:
            print(f"task {s.spec.task_index}: classes {s.spec.class_ids} "
                  f"train {len(s.train)} valid {len(s.valid)} test {len(s.test)}")
    elif cmd == "train-base":
        cfg = config_from_args(args)
        dataset = load_jsonl(args.data) if args.data else None
        splits = None
        if args.splits:
            if dataset is None:
                raise UsageError("--splits needs --data")
            with open(args.splits) as fh:
                splits = splits_from_json(json.load(fh), dataset)
        run = runner.RunDirectory(args.run_dir)
        with run.lock():
            runner.init_run(args.run_dir, cfg, dataset, splits)
            runner.run_train_base(run)
        print(f"base checkpoint written to {run.checkpoint_dir(0)}")
    elif cmd == "train-increment":
        run = runner.RunDirectory(args.run_dir)
        if args.steps < 1:
            raise UsageError("--steps must be >= 1")
        with run.lock():
            for _ in range(args.steps):
                ck = runner.run_train_increment(run)
                print(f"checkpoint written to {run.checkpoint_dir(ck.task_index)}")
    elif cmd == "eval":
        run = runner.RunDirectory(args.run_dir)
        with run.lock():
            ev = runner.run_eval(run, args.step)
        print(json.dumps({"task_index": ev.task_index, "per_task_cider": ev.per_task_cider,
                          **{k: getattr(ev.report, k) for k in runner.METRICS}}, indent=1))
    elif cmd == "report":
        run = runner.RunDirectory(args.run_dir)
        if not run.root.is_dir():
            raise UsageError(f"no run directory at {run.root}")
        with run.lock():
            summary = runner.report(args.run_dir)
        _print_curve(summary)
    elif cmd == "run-all":
        cfg = config_from_args(args)
        dataset = load_jsonl(args.data) if args.data else None
        _print_curve(runner.run_all(args.run_dir, cfg, dataset))


def _print_curve(summary: dict) -> None:
    print("step  cider_tilde  bleu4   rouge_l  meteor  cider_d")
    for s in summary["steps"]:
        print(f"{s['step']:>4}  {s['cider_tilde']:11.4f}  {s['bleu4']:.4f}  {s['rouge_l']:.4f}   "
              f"{s['meteor_lite']:.4f}  {s['cider_d']:.4f}")


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except (UsageError, ConfigurationError) as e:
        print(f"mcfvc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"mcfvc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MCFVCError as e:
        print(f"mcfvc: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
