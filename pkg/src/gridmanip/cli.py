"""Command line entry point: ``train``, ``eval``, ``ablate`` and ``replay``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import gridsim, harness
from .gridsim import TaskSpec


def _resolve_task(arg: str | None, scenario: str | None, fallback: dict | None):
    """Returns (TaskSpec, scenario document or None).

    ``arg`` may be a preset name, a task JSON file, an experiment config file
    or a scenario file (recognised by its ``blocks`` list).
    """
    if scenario is not None:
        return gridsim.load_scenario(scenario)
    if arg is None:
        if fallback is None:
            raise ValueError("no --task given and the checkpoint carries no config")
        return TaskSpec.from_dict(fallback["task"]), None
    if arg in harness.PRESETS:
        return harness.PRESETS[arg]().task, None
    path = Path(arg)
    if not path.is_file():
        raise ValueError(f"--task {arg!r} is neither a preset ({', '.join(harness.PRESETS)}) nor a file")
    doc = json.loads(path.read_text())
    if "blocks" in doc:
        return gridsim.load_scenario(path)
    if "task" in doc:
        return TaskSpec.from_dict(doc["task"]), None
    return TaskSpec.from_dict(doc), None


def cmd_train(args) -> int:
    config = harness.load_config(args.config)
    out = Path(args.out) if args.out else harness.output_root(None) / config.name.replace("/", "_")
    summary = harness.run_experiment(config, out)
    print(json.dumps(summary["mean"], indent=2))
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    params, meta = harness.load_agent(args.checkpoint)
    cfg_doc = meta.get("config")
    task, scenario = _resolve_task(args.task, args.scenario, cfg_doc)
    if task.size != params.size:
        raise ValueError(f"checkpoint expects a {params.size}x{params.size} grid, task uses {task.size}")
    config = harness.ExperimentConfig.from_dict(cfg_doc) if cfg_doc else harness.ExperimentConfig()
    config = replace(config, task=task)
    report = harness.evaluate(params, config, harness.eval_seeds(args.runs, args.seed), scenario=scenario)
    out = report.to_dict()
    if not args.verbose:
        out.pop("runs")
    print(json.dumps(out, indent=2))
    return 0


def cmd_ablate(args) -> int:
    out = Path(args.out) if args.out else harness.output_root(None) / args.preset
    seeds = tuple(args.seeds) if args.seeds else None
    results = harness.run_ablation(args.preset, out, seeds=seeds, train_steps=args.steps)
    for name, res in results.items():
        print(name, json.dumps(res["mean"]))
    print(f"wrote {out}")
    return 0


def cmd_replay(args) -> int:
    ok, msg = harness.replay_log(args.log)
    print(("OK " if ok else "MISMATCH ") + msg)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridmanip", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train and evaluate every seed in a config")
    t.add_argument("--config", required=True, help="experiment JSON; may name a base \"preset\"")
    t.add_argument("--out", help=f"output directory (default: ${harness.OUT_ENV}/<name> or runs/<name>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", help="preset name, task JSON, experiment JSON or scenario JSON")
    e.add_argument("--scenario", help="scenario JSON with a fixed block layout")
    e.add_argument("--runs", type=int, default=30)
    e.add_argument("--seed", type=int, default=harness.EVAL_SEED_BASE, help="first evaluation seed")
    e.add_argument("--verbose", action="store_true", help="include per-run records")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the three ablation arms with shared seeds")
    a.add_argument("--preset", required=True, choices=sorted(harness.ABLATION_PRESETS))
    a.add_argument("--out")
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--steps", type=int, help="override training steps per seed")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("replay", help="re-simulate a training log and check it matches bit for bit")
    r.add_argument("--log", required=True)
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
