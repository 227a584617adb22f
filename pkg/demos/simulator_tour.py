"""Walk through a few scripted actions in each task and print what happened.

    python3 demos/simulator_tour.py
"""
import math

from gridmanip import gridsim
from gridmanip.gridsim import TaskKind, TaskSpec
from gridmanip.workspace import ActionCandidate, Primitive


def draw(world):
    h = world.heights()
    for row in h:
        print("  " + "".join(str(v) if v else "." for v in row))


def do(world, primitive, x, y, theta=0.0):
    r = gridsim.step(world, ActionCandidate.make(primitive, x, y, theta))
    print(f"{primitive.name:5s} at ({x},{y}) theta={theta:.2f}: success={r.subtask_success} "
          f"progress={r.progress:.2f} terminal={r.terminal.value} {r.info.get('reason', '')}")
    return r


def main():
    task = TaskSpec(TaskKind.BLOCK_STACKING, object_count=3, goal_height=3, size=8)
    world, obs = gridsim.reset(task, seed=4)
    print("stacking three cubes, heights before:")
    draw(world)
    (x0, y0), (x1, y1), (x2, y2) = [(b["position"][0], b["position"][1]) for b in world.layout()]
    do(world, Primitive.PICK, x0, y0)
    do(world, Primitive.PLACE, x1, y1)
    do(world, Primitive.PICK, x2, y2, math.pi / 2)
    do(world, Primitive.PLACE, x1, y1)
    draw(world)

    print("\nchallenging arrangement 0:")
    spec, doc = gridsim.load_scenario(gridsim.scenario_path(0))
    world, _ = gridsim.reset(spec, seed=0, scenario=doc)
    draw(world)
    h = world.heights()

    def crowded(x, y):
        return any(0 <= x + dx < spec.size and 0 <= y + dy < spec.size and h[y + dy, x + dx]
                   for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)))

    cells = [(x, y) for y in range(spec.size) for x in range(spec.size) if h[y, x]]
    px, py = min((c for c in cells if crowded(*c)), key=lambda c: c[0])
    lone = next(c for c in cells if not crowded(*c))
    print("push the packed group to the right from its left edge, then pick the lone cube:")
    do(world, Primitive.PUSH, px - 1, py)
    do(world, Primitive.PICK, *lone)
    draw(world)

if __name__ == "__main__":
    main()
