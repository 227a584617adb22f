"""Task-progress reward maps and their anisotropic Gaussian smoothing.

The reward for an executed primitive starts as a single pixel holding
``weight(primitive) * success * progress``. Smoothing spreads it over nearby
poses with an elongated Gaussian aligned to the gripper, and the final map
keeps the larger of the sharp and the smoothed value at every pixel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .workspace import ImagePose, Primitive

WEIGHTS = {Primitive.PUSH: 0.2, Primitive.PICK: 1.0, Primitive.PLACE: 1.0}
_ANGLE_GRID = 2 ** 30


@dataclass(frozen=True)
class RewardMap:
    values: np.ndarray
    action_pixel: tuple[int, int]
    action_angle: float = 0.0

    @property
    def at_action(self) -> float:
        x, y = self.action_pixel
        return float(self.values[y, x])


@dataclass(frozen=True)
class GaussianParams:
    sigma_y: float = 1.0
    theta: float = 0.0
    kernel_radius: int | None = None

    def __post_init__(self):
        if not self.sigma_y > 0:
            raise ValueError(f"sigma_y must be positive, got {self.sigma_y}")
        if self.kernel_radius is not None and self.kernel_radius < math.ceil(3 * self.sigma_x):
            raise ValueError(f"kernel_radius {self.kernel_radius} < 3 * sigma_x")

    @property
    def sigma_x(self) -> float:
        return 2.0 * self.sigma_y

    @property
    def radius(self) -> int:
        if self.kernel_radius is not None:
            return self.kernel_radius
        return math.ceil(3 * self.sigma_x)

    def rotated(self, theta: float) -> "GaussianParams":
        return GaussianParams(self.sigma_y, theta, self.kernel_radius)


def primitive_weight(primitive: Primitive) -> float:
    return WEIGHTS[Primitive(primitive)]


def task_progress_reward(success: bool, progress: float, primitive: Primitive,
                         pose: ImagePose, size: int) -> RewardMap:
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    values = np.zeros((size, size), dtype=np.float64)
    values[pose.y, pose.x] = primitive_weight(primitive) * float(bool(success)) * progress
    return RewardMap(values, (pose.x, pose.y), pose.theta)


def gaussian_kernel(params: GaussianParams) -> np.ndarray:
    """Kernel indexed ``[v + r, u + r]`` for row offset v and column offset u.

    The x axis of the Gaussian (the long one) points along ``params.theta``
    in image coordinates (x to the right, y down).
    """
    r = params.radius
    v, u = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    # the kernel has period pi; snapping to a 2**-30 grid makes theta and theta + pi bit-identical
    steps = round(math.fmod(params.theta, math.pi) / math.pi * _ANGLE_GRID) % _ANGLE_GRID
    theta = steps * math.pi / _ANGLE_GRID
    c, s = math.cos(theta), math.sin(theta)
    # rotate (u, v) by -theta into the kernel's own frame
    up = c * u + s * v
    vp = -s * u + c * v
    sx, sy = params.sigma_x, params.sigma_y
    return np.exp(-(up ** 2 / (2 * sx ** 2) + vp ** 2 / (2 * sy ** 2))) / (2 * math.pi * sx * sy)


def smooth(rmap: RewardMap, params: GaussianParams) -> RewardMap:
    """Zero-padded convolution of the map with the kernel oriented along the action angle."""
    kernel = gaussian_kernel(params)
    r = params.radius
    n = rmap.values.shape[0]
    out = signal.convolve2d(rmap.values, kernel, mode="full")[r:r + n, r:r + n]
    return RewardMap(np.maximum(out, 0.0), rmap.action_pixel, rmap.action_angle)


def tpg_reward(success: bool, progress: float, primitive: Primitive, pose: ImagePose,
               size: int, params: GaussianParams = GaussianParams()) -> RewardMap:
    sharp = task_progress_reward(success, progress, primitive, pose, size)
    smoothed = smooth(sharp, params.rotated(pose.theta))
    return RewardMap(np.maximum(sharp.values, smoothed.values), sharp.action_pixel, sharp.action_angle)


def baseline_reward(success: bool) -> float:
    return 1.0 if success else 0.0
