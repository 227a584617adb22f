"""Deterministic top-down block world.

The world is a square grid of cell stacks. Blocks are 1x1 cubes or
multi-cell pieces (dominoes by default); a block occupies one level in every
cell of its footprint. Three primitives act on it:

* push: the closed gripper starts on an empty cell and sweeps ``push_distance``
  cells along ``theta``; whatever it runs into is translated (rigidly, whole
  stacks, chaining into neighbours) one cell per gripper step until something
  would leave the grid.
* pick: grasps the block on top of the pointed cell. Elongated blocks need the
  gripper within ``pick_tolerance`` of their long axis, and with
  ``finger_clearance`` on both finger cells beside the block must be lower than
  its top. Removal tasks delete picked blocks, stacking tasks hold them.
* place: lowers the held block with its footprint anchored at the pointed
  cell. Landing on flat support of height >= 1 raises a stack (success);
  anything else drops the block on the spot, and a drop next to a stack of
  two or more cubes knocks that stack over into a row of singles.
"""
from __future__ import annotations

import colorsys
import copy
import enum
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .workspace import (ActionCandidate, FrameMeta, N_CHANNELS, Observation, Primitive,
                        canonicalize_angle)

SHAPES = {
    "cube": ((0, 0),),
    "domino": ((0, 0), (1, 0)),
}

N_SCENARIOS = 11


class TaskKind(str, enum.Enum):
    CLUTTER_REMOVAL = "ClutterRemoval"
    CHALLENGING_ARRANGEMENT = "ChallengingArrangement"
    BLOCK_STACKING = "BlockStacking"

    @property
    def removal(self) -> bool:
        return self is not TaskKind.BLOCK_STACKING


class Terminal(str, enum.Enum):
    IN_PROGRESS = "InProgress"
    SUCCESS = "Success"
    FAILURE = "Failure"


@dataclass(frozen=True)
class BlockSpec:
    id: int
    footprint: tuple[tuple[int, int], ...]
    color_id: int = 0

    def __post_init__(self):
        cells = tuple(sorted({(int(dx), int(dy)) for dx, dy in self.footprint}))
        if not cells:
            raise ValueError(f"block {self.id}: empty footprint")
        if not _connected(cells):
            raise ValueError(f"block {self.id}: footprint {cells} is not connected")
        object.__setattr__(self, "footprint", cells)

    @property
    def elongated(self) -> bool:
        xs = {c[0] for c in self.footprint}
        ys = {c[1] for c in self.footprint}
        return len(xs) != len(ys)


def _connected(cells) -> bool:
    cells = set(cells)
    todo = [next(iter(cells))]
    seen = set(todo)
    while todo:
        x, y = todo.pop()
        for n in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if n in cells and n not in seen:
                seen.add(n)
                todo.append(n)
    return seen == cells


def orient(footprint, vertical: bool):
    """Footprint with its long axis along x (or y when ``vertical``)."""
    if not vertical:
        return tuple(footprint)
    return tuple(sorted((dy, dx) for dx, dy in footprint))


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = TaskKind.CLUTTER_REMOVAL
    object_count: int = 3
    goal_height: int = 4
    arrangement_id: int = 0
    max_consecutive_failures: int = 10
    size: int = 32
    shapes: tuple[str, ...] = ("cube", "domino")
    max_steps: int | None = None
    push_distance: int | None = None
    pick_tolerance: float = math.pi / 8
    finger_clearance: bool = True
    loose_place: bool = False
    primitives: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.primitives is not None:
            object.__setattr__(self, "primitives", tuple(str(p).lower() for p in self.primitives))
            bad = set(self.primitives) - {p.name.lower() for p in Primitive}
            if bad:
                raise ValueError(f"unknown primitives {sorted(bad)}")
        if self.object_count < 1:
            raise ValueError("object_count must be >= 1")
        if self.kind is TaskKind.BLOCK_STACKING and not 2 <= self.goal_height <= self.object_count:
            raise ValueError(f"goal_height must lie in [2, object_count], got {self.goal_height}")
        if self.max_consecutive_failures < 1:
            raise ValueError("max_consecutive_failures must be >= 1")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")

    @property
    def ideal_actions(self) -> int:
        """One pick per object for removal, one pick + one place per added block for stacking."""
        if self.kind is TaskKind.BLOCK_STACKING:
            return 2 * (self.goal_height - 1)
        return self.object_count

    @property
    def action_space(self) -> tuple[Primitive, ...]:
        """Primitives the task allows: stacking picks and places, removal tasks push and pick."""
        if self.primitives is not None:
            return tuple(p for p in Primitive if p.name.lower() in self.primitives)
        if self.kind is TaskKind.BLOCK_STACKING:
            return (Primitive.PICK, Primitive.PLACE)
        return (Primitive.PUSH, Primitive.PICK)

    @property
    def step_limit(self) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return 4 * self.ideal_actions + 2 * self.max_consecutive_failures

    @property
    def push_cells(self) -> int:
        if self.push_distance is not None:
            return self.push_distance
        return max(1, round(5 * self.size / 32))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value, "object_count": self.object_count,
            "goal_height": self.goal_height, "arrangement_id": self.arrangement_id,
            "max_consecutive_failures": self.max_consecutive_failures, "size": self.size,
            "shapes": list(self.shapes), "max_steps": self.max_steps,
            "push_distance": self.push_distance, "pick_tolerance": self.pick_tolerance,
            "finger_clearance": self.finger_clearance, "loose_place": self.loose_place,
            "primitives": list(self.primitives) if self.primitives is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


@dataclass
class StepResult:
    next_obs: Observation
    subtask_success: bool
    progress: float
    terminal: Terminal
    info: dict = field(default_factory=dict)


class World:
    """Mutable simulator state; owned by one caller and changed only through :func:`step`."""

    def __init__(self, task: TaskSpec, rng: np.random.Generator):
        self.task = task
        self.size = task.size
        self.stacks: list[list[int]] = [[] for _ in range(self.size * self.size)]
        self.blocks: dict[int, BlockSpec] = {}
        self.cells: dict[int, tuple[tuple[int, int], ...]] = {}
        self.held: int | None = None
        self.removed: list[int] = []
        self.rng = rng
        self.step_count = 0
        self.consecutive_failures = 0
        self.initial_occupied = 0

    # -- geometry helpers -------------------------------------------------
    def index(self, x: int, y: int) -> int:
        return y * self.size + x

    def inside(self, x: int, y: int) -> bool:
        return 0 <= x < self.size and 0 <= y < self.size

    def stack(self, x: int, y: int) -> list[int]:
        return self.stacks[y * self.size + x]

    def height(self, x: int, y: int) -> int:
        return len(self.stacks[y * self.size + x])

    def heights(self) -> np.ndarray:
        return np.array([len(s) for s in self.stacks], dtype=np.int64).reshape(self.size, self.size)

    def occupied(self) -> int:
        return sum(1 for s in self.stacks if s)

    def add_block(self, spec: BlockSpec, cells) -> None:
        cells = tuple((int(x), int(y)) for x, y in cells)
        for x, y in cells:
            if not self.inside(x, y):
                raise ValueError(f"block {spec.id} cell ({x}, {y}) outside the grid")
        self.blocks[spec.id] = spec
        self.cells[spec.id] = cells
        for x, y in cells:
            self.stack(x, y).append(spec.id)

    def is_top(self, block: int) -> bool:
        return all(self.stack(x, y)[-1] == block for x, y in self.cells[block])

    def block_ids(self) -> list[int]:
        """Every block id the world knows about, wherever it is."""
        on_grid = sorted({b for s in self.stacks for b in s})
        held = [self.held] if self.held is not None else []
        return sorted(on_grid + held + self.removed)

    def copy(self) -> "World":
        return copy.deepcopy(self)

    def layout(self) -> list[dict]:
        """Blocks on the grid, bottom levels first, in the scenario-file format."""
        order = []
        seen = set()
        for level in range(max((len(s) for s in self.stacks), default=0)):
            for s in self.stacks:
                if len(s) > level and s[level] not in seen:
                    seen.add(s[level])
                    order.append(s[level])
        out = []
        for b in order:
            cells = self.cells[b]
            x0 = min(c[0] for c in cells)
            y0 = min(c[1] for c in cells)
            out.append({"id": b, "footprint": [[x - x0, y - y0] for x, y in sorted(cells)],
                        "position": [x0, y0], "color_id": self.blocks[b].color_id})
        return out

    def state_key(self):
        return (tuple(tuple(s) for s in self.stacks), self.held, tuple(self.removed))


# -- rendering ------------------------------------------------------------

def color_of(color_id: int) -> tuple[float, float, float]:
    """Stable pseudo-color for a color id (golden-ratio hue walk)."""
    hue = (color_id * 0.6180339887498949) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.75, 0.9)


def render(world: World) -> Observation:
    n = world.size
    out = np.zeros((N_CHANNELS, n, n), dtype=np.float32)
    for i, s in enumerate(world.stacks):
        if s:
            y, x = divmod(i, n)
            out[:3, y, x] = color_of(world.blocks[s[-1]].color_id)
            out[3, y, x] = len(s)
    return Observation(out, FrameMeta())


# -- progress / termination -------------------------------------------------

def get_progress(world: World, task: TaskSpec | None = None) -> float:
    task = task or world.task
    if task.kind is TaskKind.BLOCK_STACKING:
        tallest = max((len(s) for s in world.stacks), default=0)
        return min(1.0, tallest / task.goal_height)
    if world.initial_occupied == 0:
        return 1.0
    return min(1.0, max(0.0, 1.0 - world.occupied() / world.initial_occupied))


def goal_reached(world: World) -> bool:
    task = world.task
    if task.kind is TaskKind.BLOCK_STACKING:
        return max((len(s) for s in world.stacks), default=0) >= task.goal_height
    return world.held is None and not any(world.stacks)


def allowed_primitives(world: World) -> tuple[Primitive, ...]:
    """The task's primitives that fit the gripper state: a held block must be placed next."""
    space = world.task.action_space
    if world.held is not None and Primitive.PLACE in space:
        return (Primitive.PLACE,)
    return tuple(p for p in space if p is not Primitive.PLACE) or space


# -- reset ----------------------------------------------------------------

def _random_layout(world: World, task: TaskSpec, rng: np.random.Generator, retries: int = 1000) -> None:
    shapes = [s for s in task.shapes]
    if task.kind is TaskKind.BLOCK_STACKING:
        shapes = ["cube"]
    for bid in range(task.object_count):
        shape = shapes[int(rng.integers(len(shapes)))]
        color = int(rng.integers(8))
        spec = BlockSpec(bid, SHAPES[shape], color)
        for _ in range(retries):
            vertical = bool(rng.integers(2))
            x0, y0 = int(rng.integers(world.size)), int(rng.integers(world.size))
            cells = [(x0 + dx, y0 + dy) for dx, dy in orient(spec.footprint, vertical)]
            if all(world.inside(x, y) and world.height(x, y) == 0 for x, y in cells):
                world.add_block(spec, cells)
                break
        else:
            raise ValueError(f"could not place block {bid} on a {world.size}x{world.size} grid "
                             f"after {retries} attempts; grid too small for {task.object_count} objects")


def scenario_path(arrangement_id: int) -> Path:
    if not 0 <= arrangement_id < N_SCENARIOS:
        raise ValueError(f"arrangement_id must be in [0, {N_SCENARIOS}), got {arrangement_id}")
    return Path(str(resources.files("gridmanip") / "scenarios" / f"arrangement_{arrangement_id:02d}.json"))


def load_scenario(path) -> tuple[TaskSpec, dict]:
    """Read a scenario file; returns the task it declares and the raw document."""
    doc = json.loads(Path(path).read_text())
    task_fields = dict(doc.get("task", {}))
    task_fields.setdefault("kind", TaskKind.CHALLENGING_ARRANGEMENT.value)
    task_fields.setdefault("size", doc["grid_size"])
    task_fields.setdefault("object_count", len(doc["blocks"]))
    return TaskSpec.from_dict(task_fields), doc


def _apply_layout(world: World, doc: dict) -> None:
    offset = (world.size - doc["grid_size"]) // 2
    if offset < 0:
        raise ValueError(f"scenario needs a {doc['grid_size']} grid, world is {world.size}")
    for b in doc["blocks"]:
        spec = BlockSpec(int(b["id"]), tuple(tuple(c) for c in b["footprint"]), int(b.get("color_id", 0)))
        x0, y0 = b["position"]
        world.add_block(spec, [(x0 + dx + offset, y0 + dy + offset) for dx, dy in spec.footprint])


def reset(task: TaskSpec, seed: int, scenario: dict | None = None) -> tuple[World, Observation]:
    rng = np.random.default_rng(seed)
    world = World(task, rng)
    if scenario is not None:
        _apply_layout(world, scenario)
    elif task.kind is TaskKind.CHALLENGING_ARRANGEMENT:
        _, doc = load_scenario(scenario_path(task.arrangement_id))
        _apply_layout(world, doc)
    else:
        _random_layout(world, task, rng)
    world.initial_occupied = world.occupied()
    return world, render(world)


# -- primitives -------------------------------------------------------------

def _round(v: float) -> int:
    return math.floor(v + 0.5)


def _unit(theta: float) -> tuple[float, float]:
    c, s = math.cos(theta), math.sin(theta)
    # snap float noise so axis-aligned pushes stay on one row/column
    return (0.0 if abs(c) < 1e-9 else c), (0.0 if abs(s) < 1e-9 else s)


def _moving_set(world: World, start: tuple[int, int], d: tuple[int, int]):
    """Blocks that move together when cell ``start`` is shoved by ``d``; None if blocked."""
    moving: set[int] = set()
    frontier = list(world.stack(*start))
    while frontier:
        b = frontier.pop()
        if b in moving:
            continue
        moving.add(b)
        for x, y in world.cells[b]:
            frontier.extend(world.stack(x, y))
            nx, ny = x + d[0], y + d[1]
            if not world.inside(nx, ny):
                return None
            frontier.extend(world.stack(nx, ny))
    return moving


def _translate(world: World, moving: set[int], d: tuple[int, int]) -> None:
    cells = sorted({c for b in moving for c in world.cells[b]})
    saved = {c: list(world.stack(*c)) for c in cells}
    for c in cells:
        world.stacks[world.index(*c)] = []
    for (x, y), s in saved.items():
        world.stacks[world.index(x + d[0], y + d[1])] = s
    for b in moving:
        world.cells[b] = tuple((x + d[0], y + d[1]) for x, y in world.cells[b])


def _push(world: World, x: int, y: int, theta: float, info: dict) -> bool:
    if world.height(x, y) > 0:
        info["reason"] = "start cell occupied"
        return False
    ux, uy = _unit(theta)
    prev = (x, y)
    moved = False
    for k in range(1, world.task.push_cells + 1):
        cur = (_round(x + k * ux), _round(y + k * uy))
        if cur == prev:
            continue
        if not world.inside(*cur):
            break
        d = (cur[0] - prev[0], cur[1] - prev[1])
        if world.height(*cur) > 0:
            moving = _moving_set(world, cur, d)
            if moving is None:
                info["reason"] = "blocked"
                break
            _translate(world, moving, d)
            moved = True
        prev = cur
    info["gripper_end"] = prev
    return moved


def _axis_angle(world: World, block: int) -> float:
    cells = world.cells[block]
    xs = {c[0] for c in cells}
    ys = {c[1] for c in cells}
    return 0.0 if len(xs) > len(ys) else math.pi / 2


def _angle_gap(a: float, b: float) -> float:
    """Distance between two axis directions (mod pi)."""
    d = abs(canonicalize_angle(a - b, Primitive.PICK))
    return min(d, math.pi - d)


def _finger_cells(world: World, block: int, x: int, y: int, theta: float):
    own = set(world.cells[block])
    ux, uy = -math.sin(theta), math.cos(theta)
    for sign in (1, -1):
        k = 1
        while True:
            c = (_round(x + sign * k * ux), _round(y + sign * k * uy))
            if c not in own:
                yield c
                break
            k += 1


def _pick(world: World, x: int, y: int, theta: float, info: dict) -> bool:
    if world.held is not None:
        info["reason"] = "gripper full"
        return False
    s = world.stack(x, y)
    if not s:
        info["reason"] = "nothing there"
        return False
    b = s[-1]
    if not world.is_top(b):
        info["reason"] = "block pinned"
        return False
    if world.blocks[b].elongated and _angle_gap(theta, _axis_angle(world, b)) > world.task.pick_tolerance + 1e-9:
        info["reason"] = "misaligned"
        return False
    if world.task.finger_clearance:
        top = len(s)
        for c in _finger_cells(world, b, x, y, theta):
            if world.inside(*c) and world.height(*c) >= top:
                info["reason"] = "finger collision"
                return False
    for cx, cy in world.cells[b]:
        world.stack(cx, cy).pop()
    if world.task.kind.removal:
        world.removed.append(b)
    else:
        world.held = b
    info["block"] = b
    return True


def _place_cells(world: World, block: int, x: int, y: int, theta: float):
    vertical = _angle_gap(theta, math.pi / 2) < math.pi / 4
    fp = orient(world.blocks[block].footprint, vertical) if world.blocks[block].elongated else world.blocks[block].footprint
    return [(x + dx, y + dy) for dx, dy in fp]


def _flat_support(world: World, cells) -> int:
    """Common height of ``cells`` if they are in bounds and level, else -1."""
    if not all(world.inside(cx, cy) for cx, cy in cells):
        return -1
    hs = {world.height(cx, cy) for cx, cy in cells}
    return hs.pop() if len(hs) == 1 else -1


def _land(world: World, block: int, cells) -> None:
    world.cells[block] = tuple(cells)
    for cx, cy in cells:
        world.stack(cx, cy).append(block)
    world.held = None


def _topple(world: World, x: int, y: int, info: dict) -> None:
    """Knock over the tallest cube stack touching (x, y) diagonally or orthogonally."""
    best = None
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            nx, ny = x + dx, y + dy
            if (dx or dy) and world.inside(nx, ny):
                s = world.stack(nx, ny)
                if len(s) >= 2 and all(len(world.cells[b]) == 1 for b in s):
                    key = (-len(s), world.index(nx, ny))
                    if best is None or key < best[0]:
                        best = (key, (nx, ny), (dx, dy))
    if best is None:
        return
    _, (sx, sy), d = best
    s = world.stack(sx, sy)
    fallen = s[1:]
    del s[1:]
    cx, cy = sx, sy
    for b in fallen:
        spot = None
        while True:
            cx, cy = cx + d[0], cy + d[1]
            if not world.inside(cx, cy):
                break
            if world.height(cx, cy) == 0:
                spot = (cx, cy)
                break
        if spot is None:
            spot = next(((i % world.size, i // world.size) for i, st in enumerate(world.stacks) if not st))
        world.stack(*spot).append(b)
        world.cells[b] = (spot,)
    info["toppled"] = [sx, sy]


def _place(world: World, x: int, y: int, theta: float, info: dict) -> bool:
    b = world.held
    if b is None:
        info["reason"] = "gripper empty"
        return False
    cells = _place_cells(world, b, x, y, theta)
    if _flat_support(world, cells) >= 1:
        _land(world, b, cells)
        return True
    if world.task.loose_place and world.height(x, y) == 0:
        options = []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                alt = [(cx + dx, cy + dy) for cx, cy in cells]
                h = _flat_support(world, alt)
                if h >= 1:
                    options.append((-h, world.index(x + dx, y + dy), alt))
        if options:
            options.sort(key=lambda o: (o[0], o[1]))
            _land(world, b, options[0][2])
            info["settled"] = True
            return True
    # drop: clamp the footprint into the grid and let it fall where it is
    xs = [c[0] for c in cells]
    ys = [c[1] for c in cells]
    sx = min(0, world.size - 1 - max(xs)) - min(0, min(xs))
    sy = min(0, world.size - 1 - max(ys)) - min(0, min(ys))
    cells = [(cx + sx, cy + sy) for cx, cy in cells]
    if world.height(x, y) == 0:
        _topple(world, x, y, info)
    _land(world, b, cells)
    info["reason"] = "dropped"
    return False


def step(world: World, action: ActionCandidate) -> StepResult:
    """Execute one primitive; mutates ``world`` and reports the outcome."""
    x, y = action.pose.x, action.pose.y
    if not world.inside(x, y):
        raise ValueError(f"action pose ({x}, {y}) outside a {world.size}x{world.size} grid")
    if not math.isfinite(action.pose.theta):
        raise ValueError(f"non-finite action angle {action.pose.theta}")
    primitive = Primitive(action.primitive)
    theta = canonicalize_angle(action.pose.theta, primitive)
    info = {"primitive": primitive.name.lower()}
    before = get_progress(world)
    if primitive is Primitive.PUSH:
        ok = _push(world, x, y, theta, info)
    elif primitive is Primitive.PICK:
        ok = _pick(world, x, y, theta, info)
    else:
        ok = _place(world, x, y, theta, info)
    world.step_count += 1
    world.consecutive_failures = 0 if ok else world.consecutive_failures + 1
    progress = get_progress(world)
    info["progress_before"] = before
    if goal_reached(world):
        terminal = Terminal.SUCCESS
    elif (world.consecutive_failures >= world.task.max_consecutive_failures
          or world.step_count >= world.task.step_limit):
        terminal = Terminal.FAILURE
    else:
        terminal = Terminal.IN_PROGRESS
    return StepResult(render(world), bool(ok), progress, terminal, info)
