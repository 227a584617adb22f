"""Pixel-wise Q-learning of push/pick/place primitives in a deterministic block world."""
from .workspace import (ActionCandidate, FrameMeta, ImagePose, Observation, Primitive, RobotPose,
                        canonicalize_angle, image_to_robot, preprocess, robot_to_image)
from .gridsim import BlockSpec, StepResult, TaskKind, TaskSpec, Terminal, World, get_progress, render, reset, step
from .reward import (GaussianParams, RewardMap, gaussian_kernel, primitive_weight, smooth,
                     task_progress_reward, tpg_reward, baseline_reward)
from .qmap import (ApproximatorParams, QMaps, TrainConfig, backward, best_action, huber_loss, predict,
                   sgd_step)
from .learner import (ExplorationState, Learner, LearnerConfig, LearnSchedule, ReplayBuffer, Transition,
                      compute_target, epsilon_greedy_schedule, lae_f, run_episode, select_action,
                      update_epsilon)
from .harness import EvalReport, ExperimentConfig, evaluate, run_experiment

__version__ = "0.1.0"
