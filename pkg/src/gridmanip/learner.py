"""Loss-adjusted exploration, reward-propagated targets, rank-based replay and the training loop."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import gridsim
from .gridsim import StepResult, Terminal, World
from .qmap import (ApproximatorParams, QMaps, Supervision, TrainConfig, best_action, huber_loss,
                   loss_and_grads, predict, sgd_step_)
from .reward import GaussianParams, baseline_reward, task_progress_reward, tpg_reward
from .workspace import PRIMITIVES, ActionCandidate, ImagePose, Observation

REWARD_VARIANTS = ("baseline", "tp", "tpg")
EXPLORATION_VARIANTS = ("epsilon_greedy", "lae")


# -- exploration --------------------------------------------------------------

@dataclass(frozen=True)
class ExplorationState:
    epsilon: float = 1.0
    sigma: float = 0.5  # inverse sensitivity
    alpha: float = 0.5
    beta: float = 0.02  # early exploration budget is roughly epsilon / beta actions

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")


def lae_f(loss: float, state: ExplorationState) -> float:
    """Boltzmann squashing of the loss magnitude into [0, 1)."""
    e = math.exp(-abs(state.alpha * loss) / state.sigma)
    return (1.0 - e) / (1.0 + e)


def update_epsilon(state: ExplorationState, loss: float) -> ExplorationState:
    eps = state.beta * lae_f(loss, state) + (1.0 - state.beta) * state.epsilon
    return replace(state, epsilon=min(1.0, max(0.0, eps)))


def epsilon_greedy_schedule(step: int, start: float = 0.5, decay: float = 0.9998, floor: float = 0.1) -> float:
    """Hand-tuned annealing used by the epsilon-greedy ablation baseline."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return max(floor, start * decay ** step)


def select_action(qmaps: QMaps, state: ExplorationState, rng: np.random.Generator,
                  allowed=None, explore_cells: np.ndarray | None = None) -> tuple[ActionCandidate, bool]:
    """Uniform random candidate with probability epsilon, otherwise the greedy one.

    ``explore_cells`` optionally restricts random pixels to a boolean mask.
    """
    prims = [p for p in PRIMITIVES if p in qmaps.q and (allowed is None or p in allowed)]
    xi = rng.random()
    if xi < state.epsilon:
        prim = prims[int(rng.integers(len(prims)))]
        n = qmaps.size
        if explore_cells is not None and explore_cells.any():
            flat = np.flatnonzero(explore_cells.ravel())
            pix = int(flat[int(rng.integers(flat.size))])
        else:
            pix = int(rng.integers(n * n))
        y, x = divmod(pix, n)
        pose = ImagePose(x, y, float(qmaps.theta[prim][y, x]), float(qmaps.q[prim][y, x]))
        return ActionCandidate(prim, pose), True
    return best_action(qmaps, prims), False


# -- transitions, targets, replay -------------------------------------------------

@dataclass(frozen=True)
class Transition:
    obs_t: Observation
    action: ActionCandidate
    reward_tpg: float
    subtask_success: bool
    obs_t1: Observation
    episode_id: int
    step_index: int
    td_error_abs: float = 0.0
    neighbours: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        if self.reward_tpg < 0:
            raise ValueError("reward must be non-negative")
        if self.td_error_abs < 0:
            raise ValueError("td_error_abs must be non-negative")

    @property
    def key(self) -> tuple[int, int]:
        return self.episode_id, self.step_index


def compute_target(tr: Transition, next_tr: Transition | None, gamma: float) -> float:
    """Immediate reward plus the discounted next reward, the latter only after a rewarded step."""
    if next_tr is not None and (next_tr.episode_id != tr.episode_id or next_tr.step_index != tr.step_index + 1):
        raise ValueError(f"transition {next_tr.key} does not follow {tr.key}")
    if next_tr is None or tr.reward_tpg <= 0:
        return tr.reward_tpg
    return tr.reward_tpg + gamma * next_tr.reward_tpg


class ReplayBuffer:
    """FIFO-bounded store sampled with probability proportional to 1 / rank(|TD error|)."""

    def __init__(self, capacity: int = 2000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._order: deque[tuple[int, int]] = deque()
        self._items: dict[tuple[int, int], Transition] = {}
        self._prio: dict[tuple[int, int], float] = {}
        self._seq: dict[tuple[int, int], int] = {}
        self._counter = 0

    def __len__(self) -> int:
        return len(self._order)

    def __iter__(self):
        return (self._items[k] for k in self._order)

    def push(self, tr: Transition) -> None:
        if tr.key in self._items:
            raise ValueError(f"transition {tr.key} already stored")
        if len(self._order) >= self.capacity:
            old = self._order.popleft()
            del self._items[old], self._prio[old], self._seq[old]
        self._order.append(tr.key)
        self._items[tr.key] = tr
        self._prio[tr.key] = tr.td_error_abs
        self._seq[tr.key] = self._counter
        self._counter += 1

    def priority(self, tr: Transition) -> float:
        return self._prio[tr.key]

    def set_priority(self, tr: Transition, value: float) -> None:
        if tr.key in self._prio:
            self._prio[tr.key] = abs(float(value))

    def next_of(self, tr: Transition) -> Transition | None:
        return self._items.get((tr.episode_id, tr.step_index + 1))

    def ranked(self) -> list[Transition]:
        """Stored transitions from largest to smallest |TD error| (older first on ties)."""
        keys = sorted(self._order, key=lambda k: (-self._prio[k], self._seq[k]))
        return [self._items[k] for k in keys]

    def sample(self, k: int, rng: np.random.Generator) -> list[Transition]:
        if not self._order:
            raise ValueError("cannot sample from an empty buffer")
        ranked = self.ranked()
        n = len(ranked)
        k = min(k, n)
        p = 1.0 / np.arange(1, n + 1)
        p /= p.sum()
        idx = rng.choice(n, size=k, replace=False, p=p)
        return [ranked[i] for i in idx]


def push_transition(buffer: ReplayBuffer, tr: Transition) -> ReplayBuffer:
    buffer.push(tr)
    return buffer


def sample_batch(buffer: ReplayBuffer, k: int, rng: np.random.Generator) -> list[Transition]:
    return buffer.sample(k, rng)


def propagated_target(buffer: ReplayBuffer, tr: Transition, gamma: float, steps: int = 1) -> float:
    """Target with rewards propagated ``steps`` transitions ahead.

    ``steps=1`` is the two-term form of :func:`compute_target`; larger values
    keep chaining through consecutive rewarded transitions (an experiment).
    """
    nxt = buffer.next_of(tr)
    if steps <= 1 or nxt is None or tr.reward_tpg <= 0:
        return compute_target(tr, nxt, gamma)
    return tr.reward_tpg + gamma * propagated_target(buffer, nxt, gamma, steps - 1)


# -- the learner ------------------------------------------------------------

@dataclass(frozen=True)
class LearnSchedule:
    gamma: float = 0.5
    total_steps: int = 5000
    replays_per_step: int = 1
    eval_interval: int = 1000
    propagation_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass(frozen=True)
class LearnerConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: LearnSchedule = field(default_factory=LearnSchedule)
    exploration: ExplorationState = field(default_factory=ExplorationState)
    reward_variant: str = "tpg"
    exploration_variant: str = "lae"
    sigma_y: float = 1.0
    neighbourhood: bool = True
    neighbourhood_weight: float = 0.1
    buffer_capacity: int = 2000
    explore_occupied_only: bool = False
    egreedy_start: float = 0.5
    egreedy_decay: float = 0.9998
    egreedy_floor: float = 0.1

    def __post_init__(self):
        if self.reward_variant not in REWARD_VARIANTS:
            raise ValueError(f"reward_variant must be one of {REWARD_VARIANTS}")
        if self.exploration_variant not in EXPLORATION_VARIANTS:
            raise ValueError(f"exploration_variant must be one of {EXPLORATION_VARIANTS}")


def reward_for(cfg: LearnerConfig, action: ActionCandidate, result: StepResult, size: int):
    """Scalar reward at the executed pixel plus neighbour targets from the reward map.

    Progress-based variants treat an action that lowered task progress as a
    failed sub-task, so reversals earn nothing.
    """
    x = result.subtask_success
    if cfg.reward_variant == "baseline":
        return baseline_reward(x), ()
    reversed_progress = result.progress < result.info.get("progress_before", result.progress)
    x = x and not reversed_progress
    if cfg.reward_variant == "tp":
        rmap = task_progress_reward(x, result.progress, action.primitive, action.pose, size)
        return rmap.at_action, ()
    params = GaussianParams(cfg.sigma_y)
    rmap = tpg_reward(x, result.progress, action.primitive, action.pose, size, params)
    r = rmap.at_action
    if not (cfg.neighbourhood and r > 0):
        return r, ()
    ax, ay = action.pose.x, action.pose.y
    rad = params.radius
    extra = []
    for yy in range(max(0, ay - rad), min(size, ay + rad + 1)):
        for xx in range(max(0, ax - rad), min(size, ax + rad + 1)):
            if (xx, yy) != (ax, ay):
                extra.append((xx, yy, float(rmap.values[yy, xx])))
    return r, tuple(extra)


class Learner:
    """Owns the networks, optimizer state, exploration state and replay buffer."""

    def __init__(self, params: ApproximatorParams, cfg: LearnerConfig = LearnerConfig(), seed: int = 0):
        self.params = params
        self.cfg = cfg
        self.velocity = params.zeros_like()
        self.exploration = cfg.exploration
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.rng = np.random.default_rng(seed)
        self.global_step = 0
        self.updates = 0

    @property
    def epsilon(self) -> float:
        if self.cfg.exploration_variant == "epsilon_greedy":
            c = self.cfg
            return epsilon_greedy_schedule(self.global_step, c.egreedy_start, c.egreedy_decay, c.egreedy_floor)
        return self.exploration.epsilon

    def act(self, obs: Observation, world: World, greedy: bool = False):
        allowed = gridsim.allowed_primitives(world)
        qmaps = predict(self.params, obs, allowed)
        if greedy:
            return best_action(qmaps, allowed), False, qmaps
        state = replace(self.exploration, epsilon=self.epsilon)
        mask = obs.height > 0 if self.cfg.explore_occupied_only else None
        action, explored = select_action(qmaps, state, self.rng, allowed, mask)
        return action, explored, qmaps

    def _fit(self, tr: Transition, target: float) -> tuple[float, float]:
        """One SGD step on ``tr``; returns (Huber TD loss, |TD error|) before the step."""
        nb = tr.neighbours
        sup = Supervision(tr.action, target, list(nb),
                          self.cfg.neighbourhood_weight / len(nb) if nb else 0.0,
                          tr.action.pose.theta if tr.subtask_success else None)
        _, delta, grads = loss_and_grads(self.params, tr.obs_t, sup, self.cfg.train.angle_weight)
        prim = tr.action.primitive.name.lower() + "/"
        sgd_step_(self.params, {k: v for k, v in grads.items() if k.startswith(prim)},
                  self.cfg.train, self.velocity)
        self.updates += 1
        return huber_loss(delta), abs(delta)

    def learn(self, tr: Transition) -> float:
        """Store ``tr``, fit it, adapt epsilon with its loss, then replay past transitions."""
        self.buffer.push(tr)
        target = propagated_target(self.buffer, tr, self.cfg.schedule.gamma, self.cfg.schedule.propagation_steps)
        loss, delta = self._fit(tr, target)
        self.buffer.set_priority(tr, delta)
        self.exploration = update_epsilon(self.exploration, loss)
        for old in self.buffer.sample(self.cfg.schedule.replays_per_step, self.rng) if len(self.buffer) > 1 else []:
            t = propagated_target(self.buffer, old, self.cfg.schedule.gamma, self.cfg.schedule.propagation_steps)
            _, d = self._fit(old, t)
            self.buffer.set_priority(old, d)
        return loss


Policy = Callable[[Observation, World], ActionCandidate]


def run_episode(world: World, learner: Learner | None, episode_id: int = 0, *, policy: Policy | None = None,
                learn: bool = True, greedy: bool = False, on_record=None, max_steps: int | None = None) -> list[dict]:
    """Roll one episode to Success/Failure; learns after every step when ``learn``.

    ``policy`` replaces the network (scripted agents). ``max_steps`` cuts the
    episode short, leaving its last record ``InProgress``. Records follow the
    JSON-lines episode-log schema.
    """
    log = []
    obs = gridsim.render(world)
    size = world.size
    terminal = Terminal.IN_PROGRESS
    step_index = 0
    while terminal is Terminal.IN_PROGRESS and (max_steps is None or step_index < max_steps):
        if policy is not None:
            action, explored = policy(obs, world), False
            q_sa = float("nan")
        else:
            action, explored, qmaps = learner.act(obs, world, greedy=greedy)
            q_sa = float(qmaps.q[action.primitive][action.pose.y, action.pose.x])
        epsilon = learner.epsilon if learner is not None and not greedy else 0.0
        result = gridsim.step(world, action)
        cfg = learner.cfg if learner is not None else LearnerConfig()
        reward, extra = reward_for(cfg, action, result, size)
        loss = None
        if learn and learner is not None:
            td = abs(q_sa - reward) if math.isfinite(q_sa) else reward
            tr = Transition(obs, action, reward, result.subtask_success, result.next_obs, episode_id,
                            step_index, td, extra)
            loss = learner.learn(tr)
            learner.global_step += 1
        terminal = result.terminal
        rec = {
            "episode": episode_id, "step": step_index,
            "primitive": action.primitive.name.lower(),
            "x": action.pose.x, "y": action.pose.y, "theta": action.pose.theta,
            "subtask_success": result.subtask_success, "progress": result.progress,
            "reward": reward, "loss": loss, "epsilon": epsilon, "explored": explored,
            "terminal": terminal.value,
            "reversal": result.progress < result.info["progress_before"],
        }
        log.append(rec)
        if on_record is not None:
            on_record(rec)
        obs = result.next_obs
        step_index += 1
    return log
