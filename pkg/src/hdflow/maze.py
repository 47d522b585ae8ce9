"""Deterministic 2D point-mass maze, a BFS waypoint expert and demo generation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import RngStream

STEP_GAIN = 0.25  # displacement per unit action, in cells
WALL_MARGIN = 1e-6
RANDOMIZATION_RADII = {"low": 0.1, "med": 0.3}  # "high" = anywhere open
MAX_PLACEMENT_TRIES = 1000
SUCCESS_NOISE = 0.05
FAIL_NOISE = 0.5
MAX_ATTEMPTS = 50

# rows listed top (largest y) to bottom; S = canonical start, G = canonical goal
DEFAULT_LAYOUT = (
    "...#...G",
    ".#.#.##.",
    ".#...#..",
    ".####.#.",
    "......#.",
    "##.##.#.",
    "...#....",
    "S.##.##.",
)


class MazeError(RuntimeError):
    pass


class EpisodeFinishedError(MazeError):
    pass


class UnreachableGoalError(MazeError):
    pass


@dataclass(frozen=True)
class MazeSpec:
    layout: tuple[str, ...] = DEFAULT_LAYOUT
    cell_size: float = 1.0
    goal_radius: float = 0.3
    max_episode_length: int = 200
    randomization: str = "low"
    maze_id: str = "maze8"

    def __post_init__(self):
        object.__setattr__(self, "layout", tuple(self.layout))
        widths = {len(r) for r in self.layout}
        if len(widths) != 1:
            raise ValueError("maze rows must have equal length")
        if self.goal_radius <= 0 or self.max_episode_length < 1 or self.cell_size <= 0:
            raise ValueError("invalid maze parameters")
        if self.randomization not in ("low", "med", "high"):
            raise ValueError(f"unknown randomization {self.randomization!r}")
        for ch in "SG":
            if sum(r.count(ch) for r in self.layout) != 1:
                raise ValueError(f"layout needs exactly one {ch!r}")

    @property
    def width(self) -> int:
        return len(self.layout[0])

    @property
    def height(self) -> int:
        return len(self.layout)

    @property
    def walls(self) -> np.ndarray:
        """Boolean array indexed ``[y, x]`` (row 0 is the bottom row)."""
        return _walls(self.layout)

    def _find(self, ch: str) -> tuple[int, int]:
        for top_row, row in enumerate(self.layout):
            if ch in row:
                return row.index(ch), self.height - 1 - top_row
        raise AssertionError

    @property
    def start_cell(self) -> tuple[int, int]:
        return self._find("S")

    @property
    def goal_cell(self) -> tuple[int, int]:
        return self._find("G")

    def cell_center(self, cell) -> np.ndarray:
        return (np.asarray(cell, dtype=np.float64) + 0.5) * self.cell_size

    def cell_of(self, pos) -> tuple[int, int]:
        p = np.asarray(pos, dtype=np.float64)
        return int(np.floor(p[0] / self.cell_size)), int(np.floor(p[1] / self.cell_size))

    def is_open(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and not self.walls[y, x]

    def extent(self) -> np.ndarray:
        return np.array([self.width, self.height], dtype=np.float64) * self.cell_size

    def to_dict(self) -> dict:
        return {
            "layout": list(self.layout),
            "cell_size": self.cell_size,
            "goal_radius": self.goal_radius,
            "max_episode_length": self.max_episode_length,
            "randomization": self.randomization,
            "maze_id": self.maze_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MazeSpec":
        return cls(**{**d, "layout": tuple(d["layout"])})


@lru_cache(maxsize=None)
def _walls(layout: tuple[str, ...]) -> np.ndarray:
    arr = np.array([[ch == "#" for ch in row] for row in layout[::-1]], dtype=bool)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class Action:
    velocity: np.ndarray

    def __post_init__(self):
        v = np.clip(np.asarray(self.velocity, dtype=np.float64).reshape(2), -1.0, 1.0)
        object.__setattr__(self, "velocity", v)


@dataclass
class Demonstration:
    observations: np.ndarray  # (T+1, 2)
    actions: np.ndarray  # (T, 2)
    success: bool
    goal: np.ndarray
    seed: int = 0
    maze_id: str = "maze8"
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return int(self.actions.shape[0])


def _sample_near(spec: MazeSpec, cell, rng: RngStream) -> np.ndarray:
    walls = spec.walls
    for _ in range(MAX_PLACEMENT_TRIES):
        if spec.randomization == "high":
            p = rng.uniform(0.0, 1.0, size=2) * spec.extent()
        else:
            r = RANDOMIZATION_RADII[spec.randomization] * spec.cell_size
            ang = rng.uniform(0.0, 2 * np.pi)
            rad = r * np.sqrt(rng.uniform())
            p = spec.cell_center(cell) + rad * np.array([np.cos(ang), np.sin(ang)])
        cx, cy = spec.cell_of(p)
        if 0 <= cx < spec.width and 0 <= cy < spec.height and not walls[cy, cx]:
            return p
    raise MazeError("no open placement found")


def env_reset(spec: MazeSpec, rng: RngStream) -> tuple[EnvState, np.ndarray]:
    start = _sample_near(spec, spec.start_cell, rng)
    goal = _sample_near(spec, spec.goal_cell, rng)
    return EnvState(position=start, t=0), goal


def move(spec: MazeSpec, pos: np.ndarray, velocity: np.ndarray) -> np.ndarray:
    """Vectorised dynamics: ``pos`` and ``velocity`` have shape ``(..., 2)``.

    Moves along x then y; a move into a wall or off the map stops
    ``WALL_MARGIN`` short of the blocking face.
    """
    cs = spec.cell_size
    walls = spec.walls
    pos = np.array(pos, dtype=np.float64)
    vel = np.clip(np.asarray(velocity, dtype=np.float64), -1.0, 1.0)
    step = STEP_GAIN * cs * vel
    for axis in (0, 1):
        other = 1 - axis
        cur = np.floor(pos[..., axis] / cs).astype(int)
        oc = np.floor(pos[..., other] / cs).astype(int)
        new = pos[..., axis] + step[..., axis]
        nc = np.floor(new / cs).astype(int)
        limit = walls.shape[1 - axis]  # number of cells along this axis
        tgt = np.clip(nc, -1, limit)
        if axis == 0:
            blocked_cell = _blocked(walls, tgt, oc)
        else:
            blocked_cell = _blocked(walls, oc, tgt)
        blocked = (nc != cur) & blocked_cell
        hi_face = (cur + 1) * cs - WALL_MARGIN
        lo_face = cur * cs + WALL_MARGIN
        new = np.where(blocked & (nc > cur), hi_face, new)
        new = np.where(blocked & (nc < cur), lo_face, new)
        pos[..., axis] = new
    return pos


def _blocked(walls: np.ndarray, x, y) -> np.ndarray:
    h, w = walls.shape
    x = np.asarray(x)
    y = np.asarray(y)
    inside = (x >= 0) & (x < w) & (y >= 0) & (y < h)
    xs = np.clip(x, 0, w - 1)
    ys = np.clip(y, 0, h - 1)
    return ~inside | walls[ys, xs]


def env_step(spec: MazeSpec, state: EnvState, a: Action) -> EnvState:
    if state.t >= spec.max_episode_length:
        raise EpisodeFinishedError("episode already finished")
    if not isinstance(a, Action):
        a = Action(a)
    return EnvState(position=move(spec, state.position, a.velocity), t=state.t + 1)


def is_success(spec: MazeSpec, state_or_pos, goal) -> bool:
    pos = state_or_pos.position if isinstance(state_or_pos, EnvState) else state_or_pos
    return bool(np.linalg.norm(np.asarray(pos) - np.asarray(goal)) <= spec.goal_radius)


@lru_cache(maxsize=256)
def _distance_field(layout: tuple[str, ...], goal_cell: tuple[int, int]) -> dict:
    walls = _walls(layout)
    h, w = walls.shape
    dist = {goal_cell: 0}
    queue = deque([goal_cell])
    while queue:
        cx, cy = queue.popleft()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = cx + dx, cy + dy
            if 0 <= nx < w and 0 <= ny < h and not walls[ny, nx] and (nx, ny) not in dist:
                dist[(nx, ny)] = dist[(cx, cy)] + 1
                queue.append((nx, ny))
    return dist


def shortest_cell_path(spec: MazeSpec, from_cell, to_cell) -> list[tuple[int, int]]:
    dist = _distance_field(spec.layout, tuple(to_cell))
    cell = tuple(from_cell)
    if cell not in dist:
        raise UnreachableGoalError(f"no path from {cell} to {tuple(to_cell)}")
    path = [cell]
    while dist[cell] > 0:
        cx, cy = cell
        # fixed neighbour order keeps the path deterministic
        for dx, dy in ((1, 0), (0, 1), (-1, 0), (0, -1)):
            n = (cx + dx, cy + dy)
            if dist.get(n, -1) == dist[cell] - 1:
                cell = n
                break
        path.append(cell)
    return path


def scripted_expert(spec: MazeSpec, state: EnvState, goal) -> Action:
    """Velocity toward the next BFS waypoint (cell centre), or the goal itself once in its cell."""
    pos = np.asarray(state.position if isinstance(state, EnvState) else state, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    path = shortest_cell_path(spec, spec.cell_of(pos), spec.cell_of(goal))
    target = goal if len(path) == 1 else spec.cell_center(path[1])
    return Action((target - pos) / (STEP_GAIN * spec.cell_size))


def rollout_expert(
    spec: MazeSpec,
    start: np.ndarray,
    goal: np.ndarray,
    rng: RngStream | None = None,
    noise: float = 0.0,
    max_steps: int | None = None,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Run the (optionally noisy) expert until success or ``max_steps``."""
    max_steps = spec.max_episode_length if max_steps is None else max_steps
    state = EnvState(np.asarray(start, dtype=np.float64), 0)
    obs, acts = [state.position], []
    done = is_success(spec, state, goal)
    while not done and state.t < max_steps:
        a = scripted_expert(spec, state, goal).velocity
        if noise > 0:
            a = a + rng.normal(size=2, scale=noise)
        act = Action(a)
        state = env_step(spec, state, act)
        obs.append(state.position)
        acts.append(act.velocity)
        done = is_success(spec, state, goal)
    return np.array(obs), np.array(acts).reshape(-1, 2), done


def _success_demo(spec: MazeSpec, rng: RngStream, seed: int) -> Demonstration:
    for attempt in range(MAX_ATTEMPTS):
        r = rng.child(attempt)
        state, goal = env_reset(spec, r)
        obs, acts, ok = rollout_expert(spec, state.position, goal, r, SUCCESS_NOISE)
        if ok:
            return Demonstration(obs, acts, True, goal, seed, spec.maze_id, {"kind": "expert"})
    raise MazeError(f"could not produce a successful demonstration in {MAX_ATTEMPTS} attempts")


def _fail_demo(spec: MazeSpec, rng: RngStream, seed: int) -> Demonstration:
    mode = "truncate" if rng.uniform() < 0.5 else "noise"
    for attempt in range(MAX_ATTEMPTS):
        r = rng.child(attempt)
        state, goal = env_reset(spec, r)
        full_obs, full_acts, ok = rollout_expert(spec, state.position, goal, r, SUCCESS_NOISE)
        if mode == "noise":
            # heavy-noise run gets the clean run's time budget
            obs, acts, ok = rollout_expert(spec, state.position, goal, r, FAIL_NOISE, max_steps=len(full_acts))
        else:
            frac = r.uniform(0.2, 0.6)
            T = max(1, int(np.floor(frac * len(full_acts))))
            obs, acts = full_obs[: T + 1], full_acts[:T]
            ok = is_success(spec, obs[-1], goal)
        if not ok and len(acts) > 0:
            return Demonstration(obs, acts, False, goal, seed, spec.maze_id, {"kind": mode})
        if attempt == MAX_ATTEMPTS // 2:
            mode = "truncate"
    raise MazeError(f"could not produce a failed demonstration in {MAX_ATTEMPTS} attempts")


def generate_dataset(spec: MazeSpec, n_success: int, n_fail: int, rng: RngStream) -> list[Demonstration]:
    """Successful demos first, then failures; each episode has its own child stream."""
    demos = []
    for i in range(n_success):
        demos.append(_success_demo(spec, rng.child(i), i))
    for j in range(n_fail):
        idx = n_success + j
        demos.append(_fail_demo(spec, rng.child(idx), idx))
    return demos
