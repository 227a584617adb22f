"""Experiment configuration, evaluation metrics, training runs, presets and log replay.

Outputs of :func:`run_experiment` for each seed ``s`` under ``<out>/seed_<s>/``:

* ``train_log.jsonl`` - a header line ``{"header": {...}}`` followed by one
  record per training step (see :data:`LOG_FIELDS`);
* ``metrics.csv`` - one row per evaluation, columns :data:`CSV_COLUMNS`;
* ``checkpoint.bin`` (+ ``.json``) - final network weights;

plus ``config.json`` and ``summary.json`` at the top level.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import gridsim
from .gridsim import TaskKind, TaskSpec, Terminal
from .learner import (ExplorationState, LearnerConfig, LearnSchedule, Learner, Policy, run_episode)
from .qmap import ApproximatorParams, TrainConfig, load_checkpoint, save_checkpoint

OUT_ENV = "GRIDMANIP_OUT"
LOG_FIELDS = ("episode", "step", "primitive", "x", "y", "theta", "subtask_success", "progress",
              "reward", "loss", "epsilon", "explored", "terminal", "reversal")
CSV_COLUMNS = ("step", "completion_rate", "pick_success_rate", "action_efficiency",
               "action_success_rate", "mean_loss", "epsilon")
EVAL_SEED_BASE = 1_000_003


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    train_steps: int = 5000
    eval_runs: int = 30
    eval_interval: int = 1000
    seeds: tuple[int, ...] = (0,)
    head_scale: float = 0.01
    window: int = 1000
    name: str = "experiment"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.train_steps < 0 or self.eval_runs < 1 or self.eval_interval < 1:
            raise ValueError("train_steps >= 0, eval_runs >= 1 and eval_interval >= 1 required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def grid_size(self) -> int:
        return self.task.size

    @property
    def reward_variant(self) -> str:
        return self.learner.reward_variant

    @property
    def exploration_variant(self) -> str:
        return self.learner.exploration_variant

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["task"] = self.task.to_dict()
        d["learner"] = _learner_to_dict(self.learner)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "task" in d:
            d["task"] = TaskSpec.from_dict(d["task"])
        if "learner" in d:
            d["learner"] = _learner_from_dict(d["learner"])
        return cls(**d)


def _learner_to_dict(cfg: LearnerConfig) -> dict:
    d = asdict(cfg)
    return d


def _learner_from_dict(d: dict) -> LearnerConfig:
    d = dict(d)
    nested = {"train": TrainConfig, "schedule": LearnSchedule, "exploration": ExplorationState}
    for key, typ in nested.items():
        if key in d:
            d[key] = typ(**d[key])
    known = {f.name for f in fields(LearnerConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown learner keys {sorted(unknown)}")
    return LearnerConfig(**d)


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    preset = doc.pop("preset", None)
    base = PRESETS[preset]().to_dict() if preset else ExperimentConfig().to_dict()
    return ExperimentConfig.from_dict(merge(base, doc))


# -- metrics ------------------------------------------------------------------

@dataclass
class EvalReport:
    completion_rate: float
    pick_success_rate: float
    action_efficiency: float
    action_success_rate: float
    runs: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def action_succeeded(rec: dict) -> bool:
    """A primitive that worked without undoing task progress."""
    return bool(rec["subtask_success"]) and not rec.get("reversal", False)


def summarize_episode(log: list[dict], task: TaskSpec) -> dict:
    picks = [r for r in log if r["primitive"] == "pick"]
    return {
        "terminal": log[-1]["terminal"] if log else Terminal.IN_PROGRESS.value,
        "completed": bool(log) and log[-1]["terminal"] == Terminal.SUCCESS.value,
        "actions": len(log),
        "picks": len(picks),
        "pick_successes": sum(1 for r in picks if r["subtask_success"]),
        "good_actions": sum(1 for r in log if action_succeeded(r)),
        "ideal_actions": task.ideal_actions,
    }


def report_from_runs(runs: list[dict]) -> EvalReport:
    """Completion over all runs; pick success and efficiency over completed runs."""
    if not runs:
        return EvalReport(0.0, 0.0, 0.0, 0.0, [])
    done = [r for r in runs if r["completed"]]
    completion = len(done) / len(runs)
    pick_rates = [r["pick_successes"] / r["picks"] for r in done if r["picks"]]
    pick = float(np.mean(pick_rates)) if pick_rates else 0.0
    eff = float(np.mean([min(1.0, r["ideal_actions"] / r["actions"]) for r in done])) if done else 0.0
    total = sum(r["actions"] for r in runs)
    success = sum(r["good_actions"] for r in runs) / total if total else 0.0
    return EvalReport(completion, pick, eff, success, runs)


def eval_seeds(n: int, base: int = EVAL_SEED_BASE) -> list[int]:
    return [base + i for i in range(n)]


def evaluate(params: ApproximatorParams | None, config: ExperimentConfig | TaskSpec, seeds,
             policy: Policy | None = None, scenario: dict | None = None) -> EvalReport:
    """Greedy rollouts with frozen weights, one per seed.

    ``policy`` replaces the network with a scripted agent.
    """
    task = config.task if isinstance(config, ExperimentConfig) else config
    lcfg = config.learner if isinstance(config, ExperimentConfig) else LearnerConfig()
    runs = []
    for s in seeds:
        world, _ = gridsim.reset(task, s, scenario)
        agent = None
        if policy is None:
            # every run starts from the same weights; nothing is learned during evaluation
            agent = Learner(params, lcfg, seed=s)
        log = run_episode(world, agent, s, policy=policy, learn=False, greedy=True)
        rec = summarize_episode(log, task)
        rec["seed"] = s
        runs.append(rec)
    return report_from_runs(runs)


def window_metrics(records: list[dict], task: TaskSpec, window: int) -> dict:
    """Training-curve metrics over the episodes that end within the last ``window`` steps."""
    if not records:
        return {"action_success_rate": 0.0, "action_efficiency": 0.0, "completion_rate": 0.0, "episodes": 0}
    tail = records[-window:]
    episodes: dict[int, list[dict]] = {}
    for r in tail:
        episodes.setdefault(r["episode"], []).append(r)
    finished = [ep for ep in episodes.values() if ep[-1]["terminal"] != Terminal.IN_PROGRESS.value]
    runs = [summarize_episode(ep, task) for ep in finished]
    rep = report_from_runs(runs)
    success = sum(1 for r in tail if action_succeeded(r)) / len(tail)
    return {"action_success_rate": success, "action_efficiency": rep.action_efficiency,
            "completion_rate": rep.completion_rate, "episodes": len(runs)}


# -- training -----------------------------------------------------------------

def world_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class _Sink:
    """Collects JSONL lines in memory and optionally tees them to a file."""

    def __init__(self, path: Path | None):
        self.lines: list[str] = []
        self._fh = open(path, "w") if path is not None else None

    def write(self, obj: dict) -> None:
        line = json.dumps(obj, sort_keys=False)
        self.lines.append(line)
        if self._fh is not None:
            self._fh.write(line + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()


def train(config: ExperimentConfig, seed: int, out_dir: Path | None = None, steps: int | None = None,
          evaluate_every: bool = True):
    """Train one seed. Returns (learner, log records, metric rows)."""
    steps = config.train_steps if steps is None else steps
    task = config.task
    params = ApproximatorParams.init(task.size, seed=seed, head_scale=config.head_scale)
    agent = Learner(params, config.learner, seed=seed)
    sink = _Sink(out_dir / "train_log.jsonl" if out_dir is not None else None)
    sink.write({"header": {"config": config.to_dict(), "seed": seed, "steps": steps}})
    records: list[dict] = []
    rows: list[dict] = []
    losses: list[float] = []
    eval_list = eval_seeds(config.eval_runs)

    def do_eval():
        rep = evaluate(agent.params, config, eval_list)
        rows.append({"step": agent.global_step, "completion_rate": rep.completion_rate,
                     "pick_success_rate": rep.pick_success_rate, "action_efficiency": rep.action_efficiency,
                     "action_success_rate": rep.action_success_rate,
                     "mean_loss": float(np.mean(losses)) if losses else 0.0, "epsilon": agent.epsilon})
        losses.clear()

    def on_record(rec):
        rec = {k: rec[k] for k in LOG_FIELDS}
        rec["step_global"] = agent.global_step - 1
        records.append(rec)
        sink.write(rec)
        if rec["loss"] is not None:
            losses.append(rec["loss"])
        if evaluate_every and agent.global_step % config.eval_interval == 0 and agent.global_step < steps:
            do_eval()

    try:
        episode = 0
        while agent.global_step < steps:
            world, _ = gridsim.reset(task, world_seed(seed, episode))
            run_episode(world, agent, episode, on_record=on_record, max_steps=steps - agent.global_step)
            episode += 1
        if evaluate_every:
            do_eval()
    finally:
        sink.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.bin", agent.params,
                        {"step": agent.global_step, "seed": seed, "config": config.to_dict()})
        write_csv(out_dir / "metrics.csv", rows)
    return agent, records, rows


def write_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    Path(path).write_text(buf.getvalue())


def output_root(out: str | os.PathLike | None) -> Path:
    if out is not None:
        return Path(out)
    return Path(os.environ.get(OUT_ENV, "runs"))


def _prepare(out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ValueError(f"output directory {out_dir} is not writable: {exc}") from exc


def run_experiment(config: ExperimentConfig, out_dir) -> dict:
    """Train and evaluate every seed; write logs, CSVs, checkpoints and a summary."""
    out_dir = Path(out_dir)
    _prepare(out_dir)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    per_seed = []
    for s in config.seeds:
        sd = out_dir / f"seed_{s}"
        sd.mkdir(exist_ok=True)
        agent, records, rows = train(config, s, sd)
        final = rows[-1] if rows else {}
        per_seed.append({"seed": s, "final_eval": final,
                         "training_window": window_metrics(records, config.task, config.window)})
    summary = {"name": config.name, "reward_variant": config.reward_variant,
               "exploration_variant": config.exploration_variant, "seeds": list(config.seeds),
               "per_seed": per_seed, "mean": _mean_summary(per_seed)}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _mean_summary(per_seed: list[dict]) -> dict:
    out = {}
    for group in ("final_eval", "training_window"):
        keys = [k for k in (per_seed[0].get(group) or {}) if k not in ("step", "episodes")]
        out[group] = {k: float(np.mean([p[group][k] for p in per_seed])) for k in keys}
    return out


# -- presets ------------------------------------------------------------------

def clutter_desk() -> ExperimentConfig:
    task = TaskSpec(TaskKind.CLUTTER_REMOVAL, object_count=3, size=16, shapes=("cube",))
    return ExperimentConfig(task=task, train_steps=5000, eval_interval=1000, name="clutter-desk")


def stacking_desk() -> ExperimentConfig:
    task = TaskSpec(TaskKind.BLOCK_STACKING, object_count=5, goal_height=3, size=16, shapes=("cube",))
    return ExperimentConfig(task=task, train_steps=10000, eval_interval=2000, name="stacking-desk")


def challenging_desk() -> ExperimentConfig:
    task = TaskSpec(TaskKind.CLUTTER_REMOVAL, object_count=6, size=16)
    return ExperimentConfig(task=task, train_steps=10000, eval_interval=2000, name="challenging-desk")


ABLATION_VARIANTS = {
    "baseline": {"reward_variant": "baseline", "exploration_variant": "epsilon_greedy"},
    "tpg": {"reward_variant": "tpg", "exploration_variant": "epsilon_greedy"},
    "tpg+lae": {"reward_variant": "tpg", "exploration_variant": "lae"},
}


def ablation(base: ExperimentConfig, seeds=(0, 1, 2, 3, 4)) -> dict[str, ExperimentConfig]:
    """The three ablation arms over one task, sharing environment and weight seeds."""
    out = {}
    for name, v in ABLATION_VARIANTS.items():
        out[name] = replace(base, learner=replace(base.learner, **v), seeds=tuple(seeds),
                            name=f"{base.name}/{name}")
    return out


PRESETS = {
    "clutter-desk": clutter_desk,
    "stacking-desk": stacking_desk,
    "challenging-desk": challenging_desk,
}
ABLATION_PRESETS = {
    "ablation-stacking": lambda: ablation(stacking_desk()),
    "ablation-clutter": lambda: ablation(clutter_desk()),
}


def run_ablation(preset: str, out_dir, seeds=None, train_steps: int | None = None) -> dict:
    if preset not in ABLATION_PRESETS:
        raise ValueError(f"unknown ablation preset {preset!r}; choose from {sorted(ABLATION_PRESETS)}")
    arms = ABLATION_PRESETS[preset]()
    out_dir = Path(out_dir)
    results = {}
    for name, cfg in arms.items():
        if seeds is not None:
            cfg = replace(cfg, seeds=tuple(seeds))
        if train_steps is not None:
            cfg = replace(cfg, train_steps=train_steps)
        results[name] = run_experiment(cfg, out_dir / name.replace("+", "_"))
    comparison = {name: res["mean"] for name, res in results.items()}
    (out_dir / "ablation.json").write_text(json.dumps(comparison, indent=2))
    return results


# -- replay -------------------------------------------------------------------

def read_log(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines or "header" not in json.loads(lines[0]):
        raise ValueError(f"{path}: missing header line")
    return json.loads(lines[0])["header"], [json.loads(l) for l in lines[1:]]


def replay_log(path) -> tuple[bool, str]:
    """Re-run the training recorded in ``path`` and compare every record byte for byte."""
    lines = Path(path).read_text().splitlines()
    header, _ = read_log(path)
    config = ExperimentConfig.from_dict(header["config"])
    _, records, _ = train(config, header["seed"], None, steps=header["steps"], evaluate_every=False)
    fresh = [json.dumps(r) for r in records]
    recorded = lines[1:]
    if len(fresh) != len(recorded):
        return False, f"record count differs: recorded {len(recorded)}, regenerated {len(fresh)}"
    for i, (a, b) in enumerate(zip(recorded, fresh)):
        if a != b:
            return False, f"first mismatch at record {i}:\n  recorded:    {a}\n  regenerated: {b}"
    return True, f"{len(fresh)} records regenerated bit-identically"


def load_agent(checkpoint) -> tuple[ApproximatorParams, dict]:
    return load_checkpoint(checkpoint)
