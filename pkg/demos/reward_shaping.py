"""Print the shaped reward around a successful pick, next to the sparse one.

    python3 demos/reward_shaping.py [--theta 0.6] [--progress 0.5]
"""
import argparse

import numpy as np

from gridmanip.reward import GaussianParams, task_progress_reward, tpg_reward
from gridmanip.workspace import ImagePose, Primitive


def show(title, values):
    print(title)
    for row in values:
        print("  " + " ".join(f"{v:5.3f}" if v >= 5e-4 else "  .  " for v in row))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--theta", type=float, default=0.6)
    ap.add_argument("--progress", type=float, default=0.5)
    args = ap.parse_args()
    pose = ImagePose(6, 6, args.theta)
    sharp = task_progress_reward(True, args.progress, Primitive.PICK, pose, 13)
    shaped = tpg_reward(True, args.progress, Primitive.PICK, pose, 13, GaussianParams(1.0))
    show("progress-weighted reward (one pixel):", sharp.values)
    show(f"with the oriented Gaussian at theta={args.theta}:", shaped.values)
    print(f"cells rewarded: {np.count_nonzero(sharp.values)} -> {np.count_nonzero(shaped.values > 1e-3)}"
          " (above 1e-3)")


if __name__ == "__main__":
    main()
