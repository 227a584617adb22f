"""Action parameterization, observations and the image <-> robot frame mapping.

Every other module speaks in terms of the types defined here: an
:class:`Observation` is a ``4 x H x W`` float tensor (three pseudo-color
channels followed by a height channel measured in block units) plus the
calibration needed to turn a pixel back into a workspace position.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

N_CHANNELS = 4
HEIGHT = 3  # index of the height channel
TWO_PI = 2.0 * math.pi


class Primitive(enum.IntEnum):
    """Motion primitive. The integer value fixes the tie-break order."""

    PUSH = 0
    PICK = 1
    PLACE = 2

    @property
    def antipodal(self) -> bool:
        return self is not Primitive.PUSH


PRIMITIVES = (Primitive.PUSH, Primitive.PICK, Primitive.PLACE)


def canonicalize_angle(theta: float, primitive: Primitive) -> float:
    """Map ``theta`` into [0, pi) for pick/place and [0, 2 pi) for push."""
    period = math.pi if Primitive(primitive).antipodal else TWO_PI
    out = math.fmod(float(theta), period)
    if out < 0.0:
        out += period
    # fmod of a tiny negative number can round up to exactly `period`
    if out >= period:
        out = 0.0
    return out


def angle_bins(primitive: Primitive, n_bins: int = 16) -> np.ndarray:
    """Discrete rotations available to a primitive (half of them for antipodal ones)."""
    step = TWO_PI / n_bins
    count = n_bins // 2 if Primitive(primitive).antipodal else n_bins
    return np.arange(count) * step


def quantize_angle(theta: float, primitive: Primitive, n_bins: int = 16) -> float:
    step = TWO_PI / n_bins
    theta = canonicalize_angle(theta, primitive)
    return canonicalize_angle(round(theta / step) * step, primitive)


@dataclass(frozen=True)
class ImagePose:
    x: int
    y: int
    theta: float = 0.0
    q: float = 0.0


@dataclass(frozen=True)
class RobotPose:
    p: tuple[float, float, float]
    theta: float = 0.0
    q: float = 0.0


@dataclass(frozen=True)
class ActionCandidate:
    primitive: Primitive
    pose: ImagePose

    @classmethod
    def make(cls, primitive, x, y, theta=0.0, q=0.0) -> "ActionCandidate":
        primitive = Primitive(primitive)
        return cls(primitive, ImagePose(int(x), int(y), canonicalize_angle(theta, primitive), float(q)))


@dataclass(frozen=True)
class FrameMeta:
    """Workspace calibration attached to an observation.

    ``origin`` is the workspace position of the image's top-left corner,
    ``cell_size`` the side of one pixel and ``block_size`` the height of one
    block, all in workspace units.
    """

    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cell_size: float = 1.0
    block_size: float = 1.0
    floor_height: float = 0.0
    color_range: float = 1.0
    rotation_offset: float = 0.0
    pick_descent: float = 0.3
    place_clearance: float = 0.5
    push_height: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FrameMeta":
        d = dict(d)
        if "origin" in d:
            d["origin"] = tuple(float(v) for v in d["origin"])
        return cls(**d)


@dataclass(frozen=True)
class Observation:
    channels: np.ndarray
    meta: FrameMeta = field(default_factory=FrameMeta)

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float32)
        if ch.ndim != 3 or ch.shape[0] != N_CHANNELS:
            raise ValueError(f"observation must be {N_CHANNELS} x H x W, got {ch.shape}")
        if ch.shape[1] != ch.shape[2]:
            raise ValueError(f"observation must be square, got {ch.shape[1]}x{ch.shape[2]}")
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)

    @property
    def size(self) -> int:
        return self.channels.shape[1]

    @property
    def height(self) -> np.ndarray:
        return self.channels[HEIGHT]

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.channels, other.channels)

    __hash__ = None


def _check_finite(channels: np.ndarray) -> None:
    bad = ~np.isfinite(channels)
    if bad.any():
        c, y, x = np.argwhere(bad)[0]
        raise ValueError(f"non-finite value {channels[c, y, x]} at channel {c}, cell ({x}, {y}); "
                         f"{int(bad.sum())} bad entries in total")


def _target_index(n_in: int, n_out: int) -> np.ndarray:
    """Output cell that each input cell lands on: floor(i * n_out / n_in)."""
    return (np.arange(n_in) * n_out) // n_in


def _resample(plane: np.ndarray, n_out: int, reduce: str) -> np.ndarray:
    n_in = plane.shape[0]
    if n_out >= n_in:
        # upsampling: every output cell reads its nearest source cell
        src = (np.arange(n_out) * n_in) // n_out
        return plane[np.ix_(src, src)]
    tgt = _target_index(n_in, n_out)
    out = np.zeros((n_out, n_out), dtype=np.float64)
    if reduce == "max":
        out[:] = -np.inf
        np.maximum.at(out, (tgt[:, None], tgt[None, :]), plane)
        return out
    count = np.zeros((n_out, n_out))
    np.add.at(out, (tgt[:, None], tgt[None, :]), plane)
    np.add.at(count, (tgt[:, None], tgt[None, :]), 1.0)
    return out / count


def preprocess(raw: Observation, target_size: int) -> Observation:
    """Resize to ``target_size`` squared, scale colors to [0, 1] and floor-center heights.

    Heights are resampled by sending every source cell to output cell
    ``floor(k * i)`` (collisions keep the tallest), so block units and block
    positions survive a downscale. Colors are area-averaged.
    """
    if target_size < 8:
        raise ValueError(f"target_size must be >= 8, got {target_size}")
    ch = np.asarray(raw.channels, dtype=np.float64)
    _check_finite(ch)
    meta = raw.meta
    out = np.empty((N_CHANNELS, target_size, target_size), dtype=np.float64)
    for c in range(HEIGHT):
        out[c] = _resample(ch[c], target_size, "mean")
    out[:HEIGHT] = np.clip(out[:HEIGHT] / meta.color_range, 0.0, 1.0)
    heights = _resample(ch[HEIGHT], target_size, "max")
    out[HEIGHT] = np.maximum(heights - meta.floor_height, 0.0)
    new_meta = replace(meta, cell_size=meta.cell_size * raw.size / target_size,
                       floor_height=0.0, color_range=1.0)
    return Observation(out.astype(np.float32), new_meta)


def _check_bounds(x: int, y: int, size: int) -> None:
    if not (0 <= x < size and 0 <= y < size):
        raise ValueError(f"pose ({x}, {y}) outside a {size}x{size} observation")


def image_to_robot(pose: ImagePose, obs: Observation, primitive: Primitive = Primitive.PICK) -> RobotPose:
    _check_bounds(pose.x, pose.y, obs.size)
    m = obs.meta
    px = m.origin[0] + m.cell_size * (pose.x + 0.5)
    py = m.origin[1] + m.cell_size * (pose.y + 0.5)
    h = float(obs.height[pose.y, pose.x])
    primitive = Primitive(primitive)
    if primitive is Primitive.PICK:
        h -= m.pick_descent
    elif primitive is Primitive.PLACE:
        h += m.place_clearance
    else:
        h = m.push_height
    pz = m.origin[2] + m.block_size * h
    return RobotPose((px, py, pz), pose.theta + m.rotation_offset, pose.q)


def robot_to_image(pose: RobotPose, obs: Observation, primitive: Primitive = Primitive.PICK) -> ImagePose:
    m = obs.meta
    x = math.floor((pose.p[0] - m.origin[0]) / m.cell_size)
    y = math.floor((pose.p[1] - m.origin[1]) / m.cell_size)
    _check_bounds(x, y, obs.size)
    return ImagePose(x, y, canonicalize_angle(pose.theta - m.rotation_offset, primitive), pose.q)


def workspace_bounds(obs: Observation) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned workspace box covered by the observation (lower, upper corners)."""
    m = obs.meta
    lo = np.array(m.origin, dtype=float)
    hi = lo + np.array([m.cell_size * obs.size, m.cell_size * obs.size, 0.0])
    hi[2] = lo[2] + m.block_size * (float(obs.height.max()) + m.place_clearance + m.push_height)
    lo[2] -= m.block_size * m.pick_descent
    return lo, hi


# Tensor dumps: little-endian float32, C x H x W row-major, with a JSON sidecar.

def save_tensor(path, array: np.ndarray, meta: dict | None = None) -> None:
    path = Path(path)
    array = np.asarray(array, dtype="<f4")
    path.write_bytes(np.ascontiguousarray(array).tobytes())
    sidecar = {"shape": list(array.shape), "dtype": "float32-le"}
    if meta is not None:
        sidecar["meta"] = meta
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_tensor(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(sidecar["shape"])
    return data.astype(np.float32), sidecar


def save_observation(path, obs: Observation) -> None:
    save_tensor(path, obs.channels, obs.meta.to_dict())


def load_observation(path) -> Observation:
    data, sidecar = load_tensor(path)
    return Observation(data, FrameMeta.from_dict(sidecar.get("meta", {})))
