import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from gridmanip import gridsim
from gridmanip.gridsim import BlockSpec, TaskKind, TaskSpec, Terminal, World
from gridmanip.learner import (ExplorationState, Learner, LearnerConfig, LearnSchedule, ReplayBuffer, Transition,
                               compute_target, epsilon_greedy_schedule, lae_f, propagated_target,
                               push_transition, reward_for, run_episode, sample_batch, select_action,
                               update_epsilon)
from gridmanip.qmap import ApproximatorParams, QMaps, best_action
from gridmanip.workspace import PRIMITIVES, ActionCandidate, Observation, Primitive

ALMOST_ONE = float(np.nextafter(1.0, 0.0))
OBS = Observation(np.zeros((4, 4, 4), np.float32))


def tr(step, reward=0.0, td=0.0, episode=0):
    return Transition(OBS, ActionCandidate.make(Primitive.PICK, 0, 0), reward, reward > 0, OBS, episode, step, td)


def const_maps(n=4, value=0.0):
    return QMaps({p: np.full((n, n), value) for p in PRIMITIVES}, {p: np.zeros((n, n)) for p in PRIMITIVES})


# -- LAE -------------------------------------------------------------------------

def test_lae_f_examples():
    s = ExplorationState()
    assert lae_f(0.0, s) == 0.0
    assert lae_f(1e6, s) == pytest.approx(1.0)
    assert lae_f(1.0, s) == pytest.approx((1 - math.exp(-1)) / (1 + math.exp(-1)), abs=1e-12)


@given(st.floats(-50, 50), st.floats(0.01, 5))
def test_lae_f_even_and_bounded(loss, sigma):
    s = ExplorationState(sigma=sigma)
    f = lae_f(loss, s)
    assert f == lae_f(-loss, s)
    assert 0.0 <= f <= 1.0
    assert lae_f(abs(loss) + 0.5, s) >= f


def test_lae_f_strictly_increasing():
    s = ExplorationState()
    vals = [lae_f(x, s) for x in np.linspace(0, 10, 50)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_exploration_state_validation():
    for bad in ({"epsilon": 1.5}, {"sigma": 0.0}, {"beta": 1.0}):
        with pytest.raises(ValueError):
            ExplorationState(**bad)


def test_update_epsilon_beta_zero():
    s = ExplorationState(epsilon=0.37, beta=0.0)
    assert update_epsilon(s, 3.0).epsilon == 0.37


def test_update_epsilon_beta_almost_one():
    s = ExplorationState(epsilon=0.9, beta=ALMOST_ONE)
    assert update_epsilon(s, 0.8).epsilon == pytest.approx(lae_f(0.8, s), abs=1e-15)


def test_update_epsilon_closed_form():
    s = ExplorationState(epsilon=0.5, beta=0.3)
    loss = 0.7
    f = lae_f(loss, s)
    for n in range(1, 101):
        s = update_epsilon(s, loss)
        assert s.epsilon == pytest.approx(f + (1 - 0.3) ** n * (0.5 - f), abs=1e-9)


@given(st.lists(st.floats(-1e3, 1e3), max_size=50), st.floats(0, 1), st.floats(0, 0.99))
def test_epsilon_stays_in_unit_interval(losses, eps, beta):
    s = ExplorationState(epsilon=eps, beta=beta)
    for loss in losses:
        s = update_epsilon(s, loss)
        assert 0.0 <= s.epsilon <= 1.0


def test_epsilon_greedy_schedule():
    assert epsilon_greedy_schedule(0) == 0.5
    assert epsilon_greedy_schedule(10 ** 7) == 0.1
    vals = [epsilon_greedy_schedule(s) for s in range(0, 20000, 100)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        epsilon_greedy_schedule(-1)


# -- select_action --------------------------------------------------------------------

def test_select_greedy_at_zero_epsilon():
    rng = np.random.default_rng(0)
    q = const_maps()
    q.q[Primitive.PLACE][2, 1] = 3.0
    for _ in range(50):
        a, explored = select_action(q, ExplorationState(epsilon=0.0), rng)
        assert not explored and a == best_action(q)


def test_select_uniform_primitives_and_pixels():
    rng = np.random.default_rng(1)
    n, draws = 4, 10_000
    prim_counts = np.zeros(3)
    pix_counts = np.zeros(n * n)
    state = ExplorationState(epsilon=ALMOST_ONE)
    for _ in range(draws):
        a, explored = select_action(const_maps(n), state, rng)
        assert explored
        prim_counts[int(a.primitive)] += 1
        pix_counts[a.pose.y * n + a.pose.x] += 1
    p = 1 / 3
    assert np.all(abs(prim_counts - draws * p) <= 3 * math.sqrt(draws * p * (1 - p)))
    assert stats.chisquare(pix_counts).pvalue > 0.01


def test_select_reproducible_and_uses_theta():
    q = const_maps()
    q.theta[Primitive.PUSH][:] = 1.5
    state = ExplorationState(epsilon=0.5)
    a = [select_action(q, state, np.random.default_rng(9)) for _ in range(2)]
    assert a[0] == a[1]

    def sequence():
        rng = np.random.default_rng(3)
        return [select_action(q, state, rng)[0] for _ in range(20)]

    assert sequence() == sequence()
    rng = np.random.default_rng(0)
    for _ in range(30):
        act, explored = select_action(q, ExplorationState(epsilon=ALMOST_ONE), rng, allowed=(Primitive.PUSH,))
        assert act.primitive is Primitive.PUSH and act.pose.theta == 1.5


def test_select_exploration_mask():
    rng = np.random.default_rng(0)
    mask = np.zeros((4, 4), bool)
    mask[1, 2] = True
    for _ in range(20):
        a, _ = select_action(const_maps(), ExplorationState(epsilon=ALMOST_ONE), rng, explore_cells=mask)
        assert (a.pose.x, a.pose.y) == (2, 1)


# -- targets -----------------------------------------------------------------------

def test_target_no_reward_blocks_future():
    assert compute_target(tr(0, 0.0), tr(1, 1.0), 0.5) == 0.0


def test_target_two_rewards():
    assert compute_target(tr(0, 1.0), tr(1, 1.0), 0.5) == 1.5


def test_target_terminal():
    assert compute_target(tr(5, 0.75), None, 0.5) == 0.75


def test_target_rejects_foreign_successor():
    with pytest.raises(ValueError):
        compute_target(tr(0, 1.0), tr(1, 1.0, episode=1), 0.5)
    with pytest.raises(ValueError):
        compute_target(tr(0, 1.0), tr(2, 1.0), 0.5)


def test_target_three_step_episode():
    rewards = [0.4, 0.0, 0.9]
    steps = [tr(i, r) for i, r in enumerate(rewards)]
    got = [compute_target(steps[i], steps[i + 1] if i + 1 < 3 else None, 0.5) for i in range(3)]
    assert got == [0.4 + 0.5 * 0.0, 0.0, 0.9]


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_gamma_zero_is_immediate_reward(rewards):
    steps = [tr(i, r) for i, r in enumerate(rewards)]
    for i, t in enumerate(steps):
        assert compute_target(t, steps[i + 1] if i + 1 < len(steps) else None, 0.0) == t.reward_tpg


def test_multi_step_propagation_flag():
    buf = ReplayBuffer()
    for i, r in enumerate([1.0, 1.0, 1.0]):
        buf.push(tr(i, r))
    first = next(iter(buf))
    assert propagated_target(buf, first, 0.5, 1) == 1.5
    assert propagated_target(buf, first, 0.5, 3) == 1.0 + 0.5 * (1.0 + 0.5 * 1.0)


def test_transition_validation():
    with pytest.raises(ValueError):
        tr(0, -0.1)
    with pytest.raises(ValueError):
        tr(0, 0.0, td=-1.0)


# -- replay buffer ----------------------------------------------------------------------

def test_buffer_single_insert():
    buf = push_transition(ReplayBuffer(), tr(0))
    assert len(buf) == 1


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(2)
    for i in range(3):
        buf.push(tr(i))
    assert [t.step_index for t in buf] == [1, 2]


def test_buffer_rank_order():
    buf = ReplayBuffer()
    for i, p in enumerate([3.0, 1.0, 2.0]):
        buf.push(tr(i, td=p))
    assert [t.step_index for t in buf.ranked()] == [0, 2, 1]
    buf.set_priority(buf.ranked()[-1], 10.0)
    assert buf.ranked()[0].step_index == 1


def test_sample_single_item():
    buf = ReplayBuffer()
    buf.push(tr(0))
    assert sample_batch(buf, 1, np.random.default_rng(0))[0].step_index == 0
    assert len(sample_batch(buf, 5, np.random.default_rng(0))) == 1
    with pytest.raises(ValueError):
        ReplayBuffer().sample(1, np.random.default_rng(0))


def test_sample_two_to_one():
    buf = ReplayBuffer()
    buf.push(tr(0, td=5.0))
    buf.push(tr(1, td=1.0))
    rng = np.random.default_rng(0)
    n = 10_000
    top = sum(sample_batch(buf, 1, rng)[0].step_index == 0 for _ in range(n))
    p = 2 / 3
    assert abs(top - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_sample_without_replacement_and_deterministic():
    buf = ReplayBuffer()
    for i in range(10):
        buf.push(tr(i, td=float(i)))
    a = sample_batch(buf, 6, np.random.default_rng(4))
    b = sample_batch(buf, 6, np.random.default_rng(4))
    assert [t.key for t in a] == [t.key for t in b]
    assert len({t.key for t in a}) == 6


def test_sample_rank_distribution_chi_square():
    buf = ReplayBuffer()
    prios = np.random.default_rng(7).permutation(8).astype(float)
    for i, p in enumerate(prios):
        buf.push(tr(i, td=p))
    rank_of = {t.step_index: r for r, t in enumerate(buf.ranked())}
    counts = np.zeros(8)
    rng = np.random.default_rng(8)
    for _ in range(10_000):
        counts[rank_of[sample_batch(buf, 1, rng)[0].step_index]] += 1
    p = 1 / np.arange(1, 9)
    p /= p.sum()
    assert stats.chisquare(counts, 10_000 * p).pvalue > 0.01


# -- rewards ----------------------------------------------------------------------------

def test_reversal_earns_nothing():
    task = TaskSpec(TaskKind.BLOCK_STACKING, object_count=4, goal_height=4, size=8)
    res = gridsim.StepResult(OBS, True, 0.25, Terminal.IN_PROGRESS, {"progress_before": 0.5})
    a = ActionCandidate.make(Primitive.PLACE, 2, 2)
    for variant in ("tp", "tpg"):
        assert reward_for(LearnerConfig(reward_variant=variant), a, res, task.size)[0] == 0.0
    assert reward_for(LearnerConfig(reward_variant="baseline"), a, res, task.size)[0] == 1.0


def test_baseline_ignores_progress():
    res = gridsim.StepResult(OBS, True, 0.25, Terminal.IN_PROGRESS, {"progress_before": 0.25})
    r, extra = reward_for(LearnerConfig(reward_variant="baseline"), ActionCandidate.make(Primitive.PICK, 0, 0),
                          res, 8)
    assert r == 1.0 and extra == ()


def test_tpg_neighbour_targets_cover_kernel_window():
    res = gridsim.StepResult(OBS, True, 0.5, Terminal.IN_PROGRESS, {"progress_before": 0.25})
    r, extra = reward_for(LearnerConfig(), ActionCandidate.make(Primitive.PICK, 7, 7), res, 16)
    assert r == 0.5
    assert len(extra) == 13 * 13 - 1
    assert all(0 <= v <= 0.5 for _, _, v in extra)


def test_config_validation():
    with pytest.raises(ValueError):
        LearnerConfig(reward_variant="shaped")
    with pytest.raises(ValueError):
        LearnerConfig(exploration_variant="boltzmann")
    with pytest.raises(ValueError):
        LearnSchedule(gamma=1.0)


# -- episodes ---------------------------------------------------------------------------

def one_block_world(max_fail=10):
    task = TaskSpec(TaskKind.CLUTTER_REMOVAL, object_count=1, size=8, max_consecutive_failures=max_fail)
    w = World(task, np.random.default_rng(0))
    w.add_block(BlockSpec(0, ((0, 0),)), [(3, 4)])
    w.initial_occupied = 1
    return w


def test_episode_always_miss_stops_after_one():
    log = run_episode(one_block_world(max_fail=1), None, policy=lambda o, w: ActionCandidate.make(Primitive.PICK, 0, 0))
    assert len(log) == 1 and log[0]["terminal"] == "Failure"


def test_episode_perfect_pick():
    log = run_episode(one_block_world(), None, policy=lambda o, w: ActionCandidate.make(Primitive.PICK, 3, 4))
    assert len(log) == 1
    assert log[0]["terminal"] == "Success" and log[0]["reward"] == 1.0


def test_episode_log_schema():
    log = run_episode(one_block_world(), None, policy=lambda o, w: ActionCandidate.make(Primitive.PICK, 3, 4))
    assert {"episode", "step", "primitive", "x", "y", "theta", "subtask_success", "progress", "reward", "loss",
            "epsilon", "explored"} <= log[0].keys()


def test_stochastic_episode_replays_identically():
    task = TaskSpec(TaskKind.CLUTTER_REMOVAL, object_count=3, size=8, shapes=("cube",))

    def rollout():
        agent = Learner(ApproximatorParams.init(8, seed=2, head_scale=0.01), seed=5)
        logs = []
        for ep in range(3):
            world, _ = gridsim.reset(task, 100 + ep)
            logs += run_episode(world, agent, ep)
        return logs, agent

    (a, agent_a), (b, agent_b) = rollout(), rollout()
    assert a == b
    assert all(np.array_equal(agent_a.params.tensors[k], agent_b.params.tensors[k]) for k in agent_a.params.tensors)
    assert all(0.0 <= r["epsilon"] <= 1.0 for r in a)


def test_learning_updates_only_executed_network():
    task = TaskSpec(TaskKind.CLUTTER_REMOVAL, object_count=1, size=8)
    params = ApproximatorParams.init(8, seed=0, head_scale=0.01)
    before = {k: v.copy() for k, v in params.tensors.items()}
    agent = Learner(params, LearnerConfig(schedule=LearnSchedule(replays_per_step=0)))
    world, _ = gridsim.reset(task, 0)
    run_episode(world, agent, policy=None, max_steps=1)
    changed = {k.split("/")[0] for k, v in params.tensors.items() if not np.array_equal(v, before[k])}
    assert len(changed) == 1
