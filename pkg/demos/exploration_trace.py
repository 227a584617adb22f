"""Compare the loss-driven exploration rate with the fixed annealing schedule.

The loss sequence is synthetic: large early, then decaying with noise, the
way a network's TD error behaves once it starts fitting.

    python3 demos/exploration_trace.py
"""
import numpy as np

from gridmanip.learner import ExplorationState, epsilon_greedy_schedule, update_epsilon


def main():
    rng = np.random.default_rng(0)
    state = ExplorationState()
    print(f"{'step':>6} {'loss':>8} {'adaptive':>9} {'annealed':>9}")
    for step in range(3001):
        loss = 2.0 * np.exp(-step / 600) + abs(rng.normal(0, 0.02))
        state = update_epsilon(state, loss)
        if step % 300 == 0:
            print(f"{step:6d} {loss:8.4f} {state.epsilon:9.4f} {epsilon_greedy_schedule(step):9.4f}")


if __name__ == "__main__":
    main()
