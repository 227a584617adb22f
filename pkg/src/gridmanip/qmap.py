"""Pixel-wise action-value networks, one per primitive, in plain numpy.

Each network is four 3x3 convolutions (stride 1, size preserving) with ReLU
between them::

    4 -> 16 -> 16 -> 16 (+ height channel skip) -> 3

The three output channels are the Q map and a (cos, sin) pair from which the
per-pixel rotation is decoded. Antipodal primitives regress the doubled
angle, so theta and theta + pi share one target.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .workspace import (HEIGHT, N_CHANNELS, PRIMITIVES, TWO_PI, ActionCandidate, ImagePose,
                        Observation, Primitive)

WIDTHS = (N_CHANNELS, 16, 16, 16)
N_OUT = 3
N_LAYERS = 4
MAGIC = b"GMQNET\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 2.0 ** -5
    batch_size: int = 1
    angle_weight: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def layer_shapes(widths=WIDTHS) -> list[tuple[int, int, int, int]]:
    c = list(widths)
    shapes = [(c[i + 1], c[i], 3, 3) for i in range(len(c) - 1)]
    shapes.append((N_OUT, c[-1] + 1, 3, 3))
    return shapes


def _key(primitive: Primitive, layer: int, kind: str) -> str:
    return f"{Primitive(primitive).name.lower()}/conv{layer + 1}/{kind}"


@dataclass
class ApproximatorParams:
    """Weights of the three networks, keyed ``"<primitive>/conv<k>/<w|b>"``."""

    tensors: dict[str, np.ndarray]
    size: int
    seed: int = 0
    widths: tuple[int, ...] = WIDTHS

    @classmethod
    def init(cls, size: int, seed: int = 0, head_scale: float = 0.0,
             widths=WIDTHS, dtype=np.float32) -> "ApproximatorParams":
        """He-uniform hidden layers; output heads scaled by ``head_scale`` (0 gives Q == 0 maps)."""
        rng = np.random.default_rng(seed)
        tensors = {}
        shapes = layer_shapes(widths)
        for prim in PRIMITIVES:
            for i, shape in enumerate(shapes):
                fan_in = shape[1] * shape[2] * shape[3]
                bound = math.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=shape)
                if i == len(shapes) - 1:
                    w = w * head_scale
                tensors[_key(prim, i, "w")] = w.astype(dtype)
                tensors[_key(prim, i, "b")] = np.zeros(shape[0], dtype=dtype)
        return cls(tensors, size, seed, tuple(widths))

    def layers(self, primitive: Primitive) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.tensors[_key(primitive, i, "w")], self.tensors[_key(primitive, i, "b")])
                for i in range(N_LAYERS)]

    def astype(self, dtype) -> "ApproximatorParams":
        return ApproximatorParams({k: v.astype(dtype) for k, v in self.tensors.items()},
                                  self.size, self.seed, self.widths)

    def copy(self) -> "ApproximatorParams":
        return self.astype(next(iter(self.tensors.values())).dtype)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


@dataclass
class QMaps:
    q: dict[Primitive, np.ndarray]
    theta: dict[Primitive, np.ndarray]

    @property
    def size(self) -> int:
        return next(iter(self.q.values())).shape[0]


# -- convolution ------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # c, h, w, 3, 3
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * 9)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    h, wd = x.shape[1:]
    return out.T.reshape(w.shape[0], h, wd), cols


def conv_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, need_dx: bool = True):
    cout, h, wd = dout.shape
    dy = dout.reshape(cout, h * wd)
    dw = (dy @ cols).reshape(w.shape)
    db = dy.sum(axis=1)
    if not need_dx:
        return None, dw, db
    cin = w.shape[1]
    dcols = (dy.T @ w.reshape(cout, -1)).reshape(h, wd, cin, 3, 3)
    dxp = np.zeros((cin, h + 2, wd + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd] += dcols[:, :, :, i, j].transpose(2, 0, 1)
    return dxp[:, 1:-1, 1:-1], dw, db


def _forward(layers, x: np.ndarray, keep: bool = False):
    caches = []
    h = x
    for i, (w, b) in enumerate(layers):
        if i == N_LAYERS - 1:
            h = np.concatenate([h, x[HEIGHT:HEIGHT + 1]], axis=0)
        z, cols = conv_forward(h, w, b)
        if i < N_LAYERS - 1:
            a = np.maximum(z, 0)
        else:
            a = z
        if keep:
            caches.append((cols, z))
        h = a
    return h, caches


def decode_angle(cos_map: np.ndarray, sin_map: np.ndarray, primitive: Primitive,
                 n_bins: int = 16) -> np.ndarray:
    phi = np.arctan2(sin_map, cos_map) % TWO_PI
    if Primitive(primitive).antipodal:
        phi = phi / 2.0
    step = TWO_PI / n_bins
    period = math.pi if Primitive(primitive).antipodal else TWO_PI
    return (np.round(phi / step) * step) % period


def angle_target(theta: float, primitive: Primitive) -> tuple[float, float]:
    k = 2.0 if Primitive(primitive).antipodal else 1.0
    return math.cos(k * theta), math.sin(k * theta)


def _check_obs(params: ApproximatorParams, obs) -> np.ndarray:
    x = obs.channels if isinstance(obs, Observation) else np.asarray(obs)
    if x.shape != (N_CHANNELS, params.size, params.size):
        raise ValueError(f"observation shape {x.shape} does not match the configured "
                         f"({N_CHANNELS}, {params.size}, {params.size})")
    return x


def predict(params: ApproximatorParams, obs, primitives=PRIMITIVES, n_bins: int = 16) -> QMaps:
    x = _check_obs(params, obs)
    dtype = next(iter(params.tensors.values())).dtype
    x = x.astype(dtype, copy=False)
    q, theta = {}, {}
    for prim in primitives:
        out, _ = _forward(params.layers(prim), x)
        q[prim] = out[0]
        theta[prim] = decode_angle(out[1], out[2], prim, n_bins)
    return QMaps(q, theta)


def best_action(qmaps: QMaps, allowed=None) -> ActionCandidate:
    """Greedy action; ties go to the lowest row-major pixel, then Push < Pick < Place."""
    prims = [p for p in PRIMITIVES if p in qmaps.q and (allowed is None or p in allowed)]
    stacked = np.stack([qmaps.q[p] for p in prims], axis=-1)  # h, w, n_prims
    flat = int(np.argmax(stacked))
    pix, k = divmod(flat, len(prims))
    n = stacked.shape[1]
    y, x = divmod(pix, n)
    prim = prims[k]
    return ActionCandidate(prim, ImagePose(x, y, float(qmaps.theta[prim][y, x]), float(qmaps.q[prim][y, x])))


# -- loss and gradients -------------------------------------------------------

def huber_loss(delta):
    """Quadratic within |delta| <= 1, linear outside; works on scalars and arrays."""
    a = np.abs(delta)
    out = np.where(a <= 1.0, 0.5 * np.square(delta), a - 0.5)
    return float(out) if np.ndim(delta) == 0 else out


def huber_grad(delta):
    return np.clip(delta, -1.0, 1.0)


@dataclass
class Supervision:
    """What a backward pass is asked to fit for one executed action.

    ``target`` is the value regressed at the executed pixel. ``extra`` holds
    further ``(x, y, value)`` pixel targets (the smoothed reward
    neighbourhood). ``angle`` is the rotation to regress at the executed
    pixel, or None to leave the angle head alone.
    """

    action: ActionCandidate
    target: float
    extra: list[tuple[int, int, float]] = field(default_factory=list)
    extra_weight: float = 1.0
    angle: float | None = None


def loss_and_grads(params: ApproximatorParams, obs, sup: Supervision, angle_weight: float = 0.5):
    """Total loss, TD error at the executed pixel, and gradients for every tensor.

    Only the executed primitive's tensors receive non-zero gradients.
    """
    x = _check_obs(params, obs)
    dtype = next(iter(params.tensors.values())).dtype
    x = x.astype(dtype, copy=False)
    prim = Primitive(sup.action.primitive)
    if prim.antipodal and sup.angle is not None:
        # theta and theta + pi are one grasp for an antipodal gripper: the
        # opposite-orientation target coincides with this one.
        assert np.allclose(angle_target(sup.angle, prim), angle_target(sup.angle + math.pi, prim), atol=1e-12)
    layers = params.layers(prim)
    out, caches = _forward(layers, x, keep=True)
    px, py = sup.action.pose.x, sup.action.pose.y
    dout = np.zeros_like(out)
    delta = float(out[0, py, px]) - sup.target
    total = huber_loss(delta)
    dout[0, py, px] += huber_grad(delta)
    for ex, ey, value in sup.extra:
        d = float(out[0, ey, ex]) - value
        total += sup.extra_weight * float(huber_loss(d))
        dout[0, ey, ex] += sup.extra_weight * huber_grad(d)
    if sup.angle is not None and angle_weight > 0:
        c, s = angle_target(sup.angle, prim)
        dc = float(out[1, py, px]) - c
        ds = float(out[2, py, px]) - s
        total += angle_weight * 0.5 * (dc * dc + ds * ds)
        dout[1, py, px] += angle_weight * dc
        dout[2, py, px] += angle_weight * ds

    grads = params.zeros_like()
    g = dout
    for i in reversed(range(N_LAYERS)):
        w, _ = layers[i]
        cols, z = caches[i]
        if i < N_LAYERS - 1:
            g = g * (z > 0)
        dx, dw, db = conv_backward(g, cols, w, need_dx=i > 0)
        grads[_key(prim, i, "w")] = dw
        grads[_key(prim, i, "b")] = db
        if i == N_LAYERS - 1:
            dx = dx[:-1]  # drop the gradient flowing into the raw height skip
        g = dx
    return total, delta, grads


def backward(params: ApproximatorParams, obs, executed: ActionCandidate, target: float,
             angle: float | None = None, angle_weight: float = 0.5):
    """Gradient of the Huber TD loss at the executed pixel."""
    if not math.isfinite(target):
        raise ValueError(f"target must be finite, got {target}")
    _, _, grads = loss_and_grads(params, obs, Supervision(executed, target, angle=angle), angle_weight)
    return grads


def sgd_step(params: ApproximatorParams, grads: dict, config: TrainConfig,
             velocity: dict | None = None) -> tuple[ApproximatorParams, dict]:
    """Classical momentum with decoupled weight decay.

    ``v <- momentum * v + g``; ``w <- w - lr * v - lr * decay * w``.
    Returns new params and the new velocity; inputs are left untouched.
    """
    velocity = velocity if velocity is not None else params.zeros_like()
    new_t, new_v = {}, {}
    lr, mu, wd = config.learning_rate, config.momentum, config.weight_decay
    for k, w in params.tensors.items():
        g = grads.get(k)
        if g is None:
            g = 0.0
        elif g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {k}")
        v = mu * velocity[k] + g
        new_v[k] = v.astype(w.dtype)
        new_t[k] = (w - lr * v - lr * wd * w).astype(w.dtype)
    return ApproximatorParams(new_t, params.size, params.seed, params.widths), new_v


def sgd_step_(params: ApproximatorParams, grads: dict, config: TrainConfig, velocity: dict) -> None:
    """In-place :func:`sgd_step` for the training loop; tensors absent from ``grads`` are left alone."""
    lr, mu, wd = config.learning_rate, config.momentum, config.weight_decay
    for k, g in grads.items():
        w, v = params.tensors[k], velocity[k]
        v *= mu
        v += g
        w -= lr * (v + wd * w)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params: ApproximatorParams, metadata: dict | None = None) -> None:
    """Binary blob (magic, version, shape table, float32 LE data) plus ``<path>.json``."""
    path = Path(path)
    names = sorted(params.tensors)
    head = bytearray(MAGIC)
    head += struct.pack("<II", CHECKPOINT_VERSION, len(names))
    for name in names:
        t = params.tensors[name]
        raw = name.encode()
        head += struct.pack("<H", len(raw)) + raw
        head += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    body = b"".join(np.ascontiguousarray(params.tensors[n], dtype="<f4").tobytes() for n in names)
    path.write_bytes(bytes(head) + body)
    meta = {"size": params.size, "seed": params.seed, "widths": list(params.widths),
            "version": CHECKPOINT_VERSION}
    meta.update(metadata or {})
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[ApproximatorParams, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        table.append((name, shape))
    tensors = {}
    for name, shape in table:
        size = int(np.prod(shape))
        if off + 4 * size > len(blob):
            raise ValueError(f"{path}: truncated at tensor {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    meta_path = path.with_suffix(path.suffix + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    size = int(meta.get("size", 0))
    widths = tuple(meta.get("widths", WIDTHS))
    return ApproximatorParams(tensors, size, int(meta.get("seed", 0)), widths), meta
