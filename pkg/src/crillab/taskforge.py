"""Procedurally generated pixel manipulation tasks on a square grid.

A task is a tiny deterministic world: an agent, an object and a goal cell
drawn as coloured squares on a per-task background.  ``reach`` tasks ask the
agent to stand on the goal; ``push`` tasks ask it to shove the object onto
the goal.  Every function here is pure: states are frozen dataclasses and
rendering allocates a fresh array.

Action ids (planar variant, ``dims == 2``)::

    0 +row   1 -row   2 +col   3 -col   4 STOP

The ``dims == 3`` variant adds a height axis (``4 +z``, ``5 -z``) and moves
STOP to id 6.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

from .errors import ContractViolation, InvalidArgument

SUITE_FORMAT_VERSION = 1

PLUS_ROW, MINUS_ROW, PLUS_COL, MINUS_COL = 0, 1, 2, 3
PLUS_Z, MINUS_Z = 4, 5

GOAL_KINDS = ("reach", "push")

# palette channel values stay away from 0/255 so tanh outputs can match them
COLOR_LO, COLOR_HI = 24, 232
INTRA_PALETTE_DISTANCE = 60
SHADE_DISTANCE = 24


def n_actions(dims: int) -> int:
    return 2 * dims + 1


def stop_action(dims: int) -> int:
    return 2 * dims


_DELTAS = {
    PLUS_ROW: (1, 0, 0),
    MINUS_ROW: (-1, 0, 0),
    PLUS_COL: (0, 1, 0),
    MINUS_COL: (0, -1, 0),
    PLUS_Z: (0, 0, 1),
    MINUS_Z: (0, 0, -1),
}


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle of cells, bounds inclusive."""

    row0: int
    col0: int
    row1: int
    col1: int

    def __post_init__(self):
        if self.row1 < self.row0 or self.col1 < self.col0:
            raise InvalidArgument(f"empty region {self}")

    def cells(self) -> Iterator[tuple[int, int]]:
        for r in range(self.row0, self.row1 + 1):
            for c in range(self.col0, self.col1 + 1):
                yield (r, c)

    def contains(self, cell) -> bool:
        r, c = cell
        return self.row0 <= r <= self.row1 and self.col0 <= c <= self.col1

    def overlaps(self, other: "Region") -> bool:
        return not (
            self.row1 < other.row0
            or other.row1 < self.row0
            or self.col1 < other.col0
            or other.col1 < self.col0
        )

    def inside(self, grid_size: int) -> bool:
        return self.row0 >= 0 and self.col0 >= 0 and self.row1 < grid_size and self.col1 < grid_size

    def sample(self, rng: np.random.Generator) -> tuple[int, int]:
        r = int(rng.integers(self.row0, self.row1 + 1))
        c = int(rng.integers(self.col0, self.col1 + 1))
        return (r, c)


Color = tuple[int, int, int]


def _chebyshev(a: Color, b: Color) -> int:
    return max(abs(int(x) - int(y)) for x, y in zip(a, b))


def shade(color: Color, level: int, depth: int) -> Color:
    """Darken ``color`` for height ``level``; level 0 is the colour itself."""
    if depth <= 1 or level == 0:
        return tuple(int(v) for v in color)
    f = 1.0 - 0.6 * level / (depth - 1)
    return tuple(int(round(v * f)) for v in color)


@dataclass(frozen=True)
class Palette:
    background: Color
    agent: Color
    object: Color
    goal: Color

    ROLES = ("background", "agent", "object", "goal")

    def colors(self) -> list[Color]:
        return [getattr(self, role) for role in self.ROLES]

    def distance(self, other: "Palette") -> int:
        """Smallest per-role Chebyshev distance between two palettes."""
        return min(_chebyshev(a, b) for a, b in zip(self.colors(), other.colors()))

    def rendered_colors(self, dims: int = 2, depth: int = 1) -> list[Color]:
        """Every colour that can appear in a frame of this palette."""
        out = [self.background, self.object]
        levels = range(depth) if dims == 3 else range(1)
        out += [shade(self.agent, z, depth) for z in levels]
        out += [shade(self.goal, z, depth) for z in levels]
        return out


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    goal_kind: str
    palette: Palette
    agent_region: Region
    object_home_region: Region
    goal_region: Region
    grid_size: int = 8
    image_size: int = 32
    max_steps: int = 40
    dims: int = 2
    depth: int = 3

    def __post_init__(self):
        if self.task_id < 1:
            raise InvalidArgument("task_id must be >= 1")
        if self.goal_kind not in GOAL_KINDS:
            raise InvalidArgument(f"goal_kind must be one of {GOAL_KINDS}")
        if self.grid_size < 6:
            raise InvalidArgument("grid_size must be >= 6")
        if self.image_size % self.grid_size:
            raise InvalidArgument("image_size must be divisible by grid_size")
        if self.max_steps < 1:
            raise InvalidArgument("max_steps must be >= 1")
        if self.dims not in (2, 3):
            raise InvalidArgument("dims must be 2 or 3")
        for name in ("agent_region", "object_home_region", "goal_region"):
            if not getattr(self, name).inside(self.grid_size):
                raise InvalidArgument(f"{name} is outside the grid")
        if self.goal_region.overlaps(self.object_home_region):
            raise InvalidArgument("goal_region and object_home_region overlap")
        if self.goal_kind == "push":
            # the expert pushes from behind, so objects must start off the border
            r = self.object_home_region
            if min(r.row0, r.col0) < 1 or max(r.row1, r.col1) > self.grid_size - 2:
                raise InvalidArgument("push tasks need an interior object_home_region")
            if self.agent_region.overlaps(self.object_home_region):
                raise InvalidArgument("push tasks need agent_region disjoint from object_home_region")

    @property
    def cell_px(self) -> int:
        return self.image_size // self.grid_size

    @property
    def n_actions(self) -> int:
        return n_actions(self.dims)

    @property
    def stop(self) -> int:
        return stop_action(self.dims)

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.image_size, self.image_size, 3)


@dataclass(frozen=True)
class EnvState:
    agent_cell: tuple[int, int]
    object_cell: tuple[int, int]
    goal_cell: tuple[int, int]
    step_count: int = 0
    done: bool = False
    succeeded: bool = False
    agent_z: int = 0
    goal_z: int = 0

    def positions(self):
        return (self.agent_cell, self.object_cell, self.goal_cell, self.agent_z, self.goal_z)


# -- suites ---------------------------------------------------------------

_CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right")
_OPPOSITE = {
    "top_left": "bottom_right",
    "top_right": "bottom_left",
    "bottom_left": "top_right",
    "bottom_right": "top_left",
}


def _corner_region(corner: str, grid_size: int, k: int, extent: int = None) -> Region:
    """The ``k`` x ``k`` block in ``corner``, or its innermost ``extent`` x ``extent`` part."""
    top = corner.startswith("top")
    left = corner.endswith("left")
    r0 = 0 if top else grid_size - k
    c0 = 0 if left else grid_size - k
    e = k if extent is None else extent
    if top:
        r0 += k - e
    if left:
        c0 += k - e
    return Region(r0, c0, r0 + e - 1, c0 + e - 1)


def _random_palette(rng, previous, min_distance, dims, depth, max_tries=20000) -> Palette:
    for _ in range(max_tries):
        cols = rng.integers(COLOR_LO, COLOR_HI + 1, size=(4, 3))
        pal = Palette(*(tuple(int(v) for v in row) for row in cols))
        base = pal.colors()
        rendered = pal.rendered_colors(dims, depth)
        ok = all(
            _chebyshev(a, b) >= INTRA_PALETTE_DISTANCE
            for i, a in enumerate(base)
            for b in base[i + 1:]
        ) and all(
            _chebyshev(a, b) >= SHADE_DISTANCE
            for i, a in enumerate(rendered)
            for b in rendered[i + 1:]
        )
        if ok and all(pal.distance(p) > min_distance for p in previous):
            return pal
    raise InvalidArgument("could not find distinguishable palettes; lower min_palette_distance")


def make_suite(
    n_tasks: int,
    seed: int,
    *,
    grid_size: int = 8,
    image_size: int = 32,
    max_steps: int = 40,
    dims: int = 2,
    depth: int = 3,
    min_palette_distance: int = 40,
    goal_extent: int = 1,
) -> list[TaskSpec]:
    """Build ``n_tasks`` tasks; a pure function of its arguments.

    Goal kinds alternate reach/push starting with reach.  Goal regions cycle
    through the four grid corners (top-left, top-right, bottom-left,
    bottom-right) so consecutive tasks demand different motion, agents start
    in the opposite corner and objects start in a central block of the same
    size as the corner regions.  The goal region is the ``goal_extent`` x
    ``goal_extent`` part of its corner block nearest the centre.
    """
    if n_tasks < 1:
        raise InvalidArgument("n_tasks must be >= 1")
    k = max(1, grid_size // 4)
    if not 1 <= goal_extent <= k:
        raise InvalidArgument(f"goal_extent must lie in [1, {k}]")
    rng = np.random.default_rng(seed)
    lo = (grid_size - k) // 2
    centre = Region(lo, lo, lo + k - 1, lo + k - 1)
    suite: list[TaskSpec] = []
    palettes: list[Palette] = []
    for i in range(n_tasks):
        corner = _CORNERS[i % 4]
        pal = _random_palette(rng, palettes, min_palette_distance, dims, depth)
        palettes.append(pal)
        suite.append(
            TaskSpec(
                task_id=i + 1,
                goal_kind=GOAL_KINDS[i % 2],
                palette=pal,
                agent_region=_corner_region(_OPPOSITE[corner], grid_size, k),
                object_home_region=centre,
                goal_region=_corner_region(corner, grid_size, k, goal_extent),
                grid_size=grid_size,
                image_size=image_size,
                max_steps=max_steps,
                dims=dims,
                depth=depth,
            )
        )
    return suite


def suite_to_dict(suite: list[TaskSpec]) -> dict:
    return {
        "format_version": SUITE_FORMAT_VERSION,
        "tasks": [task_to_dict(t) for t in suite],
    }


def task_to_dict(task: TaskSpec) -> dict:
    d = asdict(task)
    d["palette"] = {k: list(v) for k, v in d["palette"].items()}
    for name in ("agent_region", "object_home_region", "goal_region"):
        r = d[name]
        d[name] = [r["row0"], r["col0"], r["row1"], r["col1"]]
    return d


def task_from_dict(d: dict) -> TaskSpec:
    d = dict(d)
    d["palette"] = Palette(**{k: tuple(int(x) for x in v) for k, v in d["palette"].items()})
    for name in ("agent_region", "object_home_region", "goal_region"):
        d[name] = Region(*(int(x) for x in d[name]))
    return TaskSpec(**d)


def suite_from_dict(d: dict) -> list[TaskSpec]:
    if d.get("format_version") != SUITE_FORMAT_VERSION:
        raise InvalidArgument(f"unsupported suite format_version {d.get('format_version')!r}")
    return [task_from_dict(t) for t in d["tasks"]]


def save_suite(suite: list[TaskSpec], path) -> None:
    text = yaml.safe_dump(suite_to_dict(suite), sort_keys=True, default_flow_style=None)
    Path(path).write_text(text)


def load_suite(path) -> list[TaskSpec]:
    return suite_from_dict(yaml.safe_load(Path(path).read_text()))


# -- dynamics -------------------------------------------------------------

def reset(task: TaskSpec, episode_seed: int) -> EnvState:
    """Sample an initial state; deterministic in ``(task.task_id, episode_seed)``."""
    rng = np.random.default_rng([task.task_id, int(episode_seed)])
    agent = task.agent_region.sample(rng)
    obj = task.object_home_region.sample(rng)
    goal = task.goal_region.sample(rng)
    agent_z = goal_z = 0
    if task.dims == 3:
        agent_z = int(rng.integers(0, task.depth))
        if task.goal_kind == "reach":
            goal_z = int(rng.integers(0, task.depth))
    return EnvState(agent, obj, goal, agent_z=agent_z, goal_z=goal_z)


def _clamp(v: int, hi: int) -> int:
    return min(max(v, 0), hi)


def step(task: TaskSpec, state: EnvState, action: int) -> EnvState:
    """Advance one step.

    Movement is clamped at the border.  In push tasks an agent on the floor
    (height 0) that moves into the object shoves it one cell; if the object
    is against the border neither of them moves.
    """
    if state.done:
        raise ContractViolation("step() called on a finished episode")
    action = int(action)
    if not 0 <= action < task.n_actions:
        raise InvalidArgument(f"action {action} outside 0..{task.n_actions - 1}")
    g = task.grid_size - 1
    agent, obj, az = state.agent_cell, state.object_cell, state.agent_z
    stopped = action == task.stop
    if not stopped:
        dr, dc, dz = _DELTAS[action]
        if dz:
            az = _clamp(az + dz, task.depth - 1)
        else:
            target = (_clamp(agent[0] + dr, g), _clamp(agent[1] + dc, g))
            if task.goal_kind == "push" and az == 0 and target == obj and target != agent:
                pushed = (_clamp(obj[0] + dr, g), _clamp(obj[1] + dc, g))
                if pushed != obj:
                    agent, obj = target, pushed
            else:
                agent = target
    count = state.step_count + 1
    new = replace(state, agent_cell=agent, object_cell=obj, agent_z=az, step_count=count)
    done = stopped or count >= task.max_steps
    if done:
        new = replace(new, done=True, succeeded=is_success(task, new))
    return new


def is_success(task: TaskSpec, state: EnvState) -> bool:
    if task.goal_kind == "reach":
        return state.agent_cell == state.goal_cell and state.agent_z == state.goal_z
    return state.object_cell == state.goal_cell


# -- scripted expert ------------------------------------------------------

_PLANAR_PREFERENCE = (PLUS_ROW, MINUS_ROW, PLUS_COL, MINUS_COL)


def _bfs_distances(grid_size, target, blocked):
    dist = {target: 0}
    queue = deque([target])
    while queue:
        cell = queue.popleft()
        for a in _PLANAR_PREFERENCE:
            dr, dc, _ = _DELTAS[a]
            nxt = (cell[0] + dr, cell[1] + dc)
            if nxt in dist or nxt == blocked:
                continue
            if 0 <= nxt[0] < grid_size and 0 <= nxt[1] < grid_size:
                dist[nxt] = dist[cell] + 1
                queue.append(nxt)
    return dist


def _navigate(task, agent, target, blocked=None) -> int:
    """First action on a shortest path, preferring row moves over column moves."""
    dist = _bfs_distances(task.grid_size, target, blocked)
    here = dist[agent]
    for a in _PLANAR_PREFERENCE:
        dr, dc, _ = _DELTAS[a]
        nxt = (agent[0] + dr, agent[1] + dc)
        if dist.get(nxt, here + 1) < here:
            return a
    raise ContractViolation(f"no path from {agent} to {target}")


def expert_action(task: TaskSpec, state: EnvState) -> int:
    """Scripted demonstrator.

    Height is fixed first (3-D variant), then rows, then columns.  For push
    tasks the object is pushed along the row axis until it sits on the goal
    row, then along the column axis; the agent walks around the object to
    reach the pushing position.  Returns STOP exactly when the task is solved.
    """
    if state.done:
        raise ContractViolation("expert_action() called on a finished episode")
    if is_success(task, state):
        return task.stop
    agent = state.agent_cell
    if task.goal_kind == "reach":
        if state.agent_z != state.goal_z:
            return PLUS_Z if state.goal_z > state.agent_z else MINUS_Z
        return _navigate(task, agent, state.goal_cell)
    if state.agent_z != 0:
        return MINUS_Z
    obj, goal = state.object_cell, state.goal_cell
    if obj[0] != goal[0]:
        d = 1 if goal[0] > obj[0] else -1
        behind, push = (obj[0] - d, obj[1]), (PLUS_ROW if d > 0 else MINUS_ROW)
    else:
        d = 1 if goal[1] > obj[1] else -1
        behind, push = (obj[0], obj[1] - d), (PLUS_COL if d > 0 else MINUS_COL)
    if agent == behind:
        return push
    return _navigate(task, agent, behind, blocked=obj)


def expert_rollout(task: TaskSpec, episode_seed: int):
    """Run the expert from ``reset``; returns (states, actions)."""
    state = reset(task, episode_seed)
    states, actions = [state], []
    while not state.done:
        a = expert_action(task, state)
        state = step(task, state, a)
        states.append(state)
        actions.append(a)
    return states, actions


# -- rendering ------------------------------------------------------------

def _margin(task: TaskSpec) -> int:
    return 1 if task.cell_px >= 3 else 0


def render_uint8(task: TaskSpec, state: EnvState) -> np.ndarray:
    """Frame as 8-bit RGB.

    The object fills its cell.  The goal is a 1-pixel ring drawn over
    whatever occupies its cell, so it stays visible when the object is pushed
    onto it.  The agent fills the cell minus the ring and is drawn last.
    """
    pal = task.palette
    px, m = task.cell_px, _margin(task)
    img = np.empty(task.frame_shape, dtype=np.uint8)
    img[...] = pal.background

    def fill(cell, color, inset=0):
        r, c = cell[0] * px, cell[1] * px
        img[r + inset: r + px - inset, c + inset: c + px - inset] = color

    fill(state.object_cell, pal.object)
    inner = img[state.goal_cell[0] * px + m, state.goal_cell[1] * px + m].copy()
    fill(state.goal_cell, shade(pal.goal, state.goal_z, task.depth))
    fill(state.goal_cell, inner, inset=m)
    fill(state.agent_cell, shade(pal.agent, state.agent_z, task.depth), inset=m)
    return img


def normalize(img_u8: np.ndarray) -> np.ndarray:
    return (img_u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def denormalize(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(frame, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def render(task: TaskSpec, state: EnvState) -> np.ndarray:
    """Frame in ``[-1, 1]`` with shape ``(image_size, image_size, 3)``, float32."""
    return normalize(render_uint8(task, state))


def decode_frame(task: TaskSpec, frame: np.ndarray) -> EnvState:
    """Invert ``render`` for a frame of ``task``.

    Only positions (and heights) are recovered; step_count/done are reset.
    Raises ``InvalidArgument`` when the frame is not a rendering of the task.
    """
    if _margin(task) == 0:
        raise InvalidArgument("decode_frame needs cells of at least 3 pixels")
    img = denormalize(frame) if np.asarray(frame).dtype != np.uint8 else np.asarray(frame)
    pal, px = task.palette, task.cell_px
    levels = range(task.depth) if task.dims == 3 else range(1)
    agent_shades = {shade(pal.agent, z, task.depth): z for z in levels}
    goal_shades = {shade(pal.goal, z, task.depth): z for z in levels}
    obj_color = tuple(pal.object)
    inner = img[px // 2:: px, px // 2:: px]
    ring = img[::px, ::px]
    agent = obj = goal = None
    agent_z = goal_z = 0
    for r in range(task.grid_size):
        for c in range(task.grid_size):
            ci = tuple(int(v) for v in inner[r, c])
            co = tuple(int(v) for v in ring[r, c])
            if ci in agent_shades:
                agent, agent_z = (r, c), agent_shades[ci]
            if co in goal_shades:
                goal, goal_z = (r, c), goal_shades[co]
                if ci == obj_color:
                    obj = (r, c)
            elif co == obj_color:
                obj = (r, c)
    if obj is None and agent is not None and agent == goal:
        obj = agent  # under the agent, inside the goal ring
    if agent is None or obj is None or goal is None:
        raise InvalidArgument(f"frame is not a rendering of task {task.task_id}")
    return EnvState(agent, obj, goal, agent_z=agent_z, goal_z=goal_z)
