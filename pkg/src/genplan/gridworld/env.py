"""Discrete gridworld: cells, agent pose, transition function and missions."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np


class Kind(enum.IntEnum):
    FLOOR = 0
    WALL = 1
    DOOR = 2
    KEY = 3
    OBSTACLE = 4
    GOAL = 5


class DoorState(enum.IntEnum):
    OPEN = 0
    CLOSED = 1
    LOCKED = 2


COLORS = ("red", "green", "blue", "purple", "yellow", "grey")
N_COLORS = len(COLORS)


class Cell(NamedTuple):
    kind: Kind = Kind.FLOOR
    color: int = 0
    door: DoorState = DoorState.OPEN

    @property
    def passable(self) -> bool:
        if self.kind in (Kind.FLOOR, Kind.GOAL):
            return True
        return self.kind == Kind.DOOR and self.door == DoorState.OPEN


FLOOR = Cell()
WALL = Cell(Kind.WALL)
OBSTACLE = Cell(Kind.OBSTACLE)


def goal(color: int) -> Cell:
    return Cell(Kind.GOAL, color)


def key(color: int) -> Cell:
    return Cell(Kind.KEY, color)


def door(color: int, state: DoorState = DoorState.CLOSED) -> Cell:
    return Cell(Kind.DOOR, color, DoorState(state))


class Action(enum.IntEnum):
    LEFT = 0
    RIGHT = 1
    FORWARD = 2
    OPEN = 3
    DROP = 4
    PICKUP = 5


N_ACTIONS = len(Action)
# east, south, west, north
HEADINGS = ((1, 0), (0, 1), (-1, 0), (0, -1))


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable map; mutations return a new grid."""

    width: int
    height: int
    cells: tuple
    rooms: tuple = ()  # (x0, y0, x1, y1) interior boxes, informational only

    def __post_init__(self):
        if len(self.cells) != self.width * self.height:
            raise ValueError("cell count does not match grid size")
        object.__setattr__(self, "_hash", hash((self.width, self.cells)))

    def __hash__(self) -> int:  # grids are hashed constantly by the expert search
        return self._hash

    def __eq__(self, other) -> bool:
        if not isinstance(other, Grid):
            return NotImplemented
        return self._hash == other._hash and self.width == other.width and self.cells == other.cells

    @classmethod
    def empty(cls, width: int, height: int) -> "Grid":
        cells = [FLOOR] * (width * height)
        for x in range(width):
            cells[x] = WALL
            cells[(height - 1) * width + x] = WALL
        for y in range(height):
            cells[y * width] = WALL
            cells[y * width + width - 1] = WALL
        return cls(width, height, tuple(cells), ((1, 1, width - 2, height - 2),))

    def index(self, x: int, y: int) -> int:
        return y * self.width + x

    def inside(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def at(self, x: int, y: int) -> Cell:
        return self.cells[y * self.width + x]

    def with_cell(self, x: int, y: int, cell: Cell) -> "Grid":
        cells = list(self.cells)
        cells[y * self.width + x] = cell
        return replace(self, cells=tuple(cells))

    def with_cells(self, updates: dict) -> "Grid":
        cells = list(self.cells)
        for (x, y), cell in updates.items():
            cells[y * self.width + x] = cell
        return replace(self, cells=tuple(cells))

    def find(self, kind: Kind) -> list[tuple[int, int]]:
        return [(i % self.width, i // self.width) for i, c in enumerate(self.cells) if c.kind == kind]

    def layout_key(self) -> tuple:
        """Hashable summary of walls and doors, used to tell layouts apart."""
        return tuple(c.kind in (Kind.WALL, Kind.DOOR) for c in self.cells)

    def dump(self, agent: Optional["AgentState"] = None) -> str:
        """One character per cell; see :data:`DUMP_CHARS`."""
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                if agent is not None and agent.cell == (x, y):
                    row.append(">v<^"[agent.heading])
                else:
                    row.append(cell_char(self.at(x, y)))
            rows.append("".join(row))
        return "\n".join(rows)


# floor, wall, door open/closed/locked, key, obstacle, goal
DUMP_CHARS = {"floor": ".", "wall": "#", "open": "_", "closed": "D", "locked": "L",
              "key": "k", "obstacle": "o", "goal": "G"}


def cell_char(cell: Cell) -> str:
    if cell.kind == Kind.DOOR:
        return DUMP_CHARS[cell.door.name.lower()]
    return DUMP_CHARS[cell.kind.name.lower()]


def parse_dump(text: str) -> tuple[Grid, Optional["AgentState"]]:
    """Inverse of :meth:`Grid.dump` for debugging and golden tests (colour 0)."""
    lines = [ln for ln in text.strip().splitlines()]
    h, w = len(lines), len(lines[0])
    inv = {v: k for k, v in DUMP_CHARS.items()}
    cells, agent = [], None
    for y, line in enumerate(lines):
        if len(line) != w:
            raise ValueError(f"row {y} has width {len(line)}, expected {w}")
        for x, ch in enumerate(line):
            if ch in ">v<^":
                agent = AgentState((x, y), ">v<^".index(ch))
                cells.append(FLOOR)
                continue
            name = inv.get(ch)
            if name is None:
                raise ValueError(f"unknown cell character {ch!r} at ({x}, {y})")
            if name in ("open", "closed", "locked"):
                cells.append(door(0, DoorState[name.upper()]))
            else:
                cells.append({"floor": FLOOR, "wall": WALL, "key": key(0),
                              "obstacle": OBSTACLE, "goal": goal(0)}[name])
    return Grid(w, h, tuple(cells)), agent


@dataclass(frozen=True)
class AgentState:
    cell: tuple[int, int]
    heading: int = 0
    carrying: Optional[Cell] = None

    @property
    def front(self) -> tuple[int, int]:
        dx, dy = HEADINGS[self.heading]
        return self.cell[0] + dx, self.cell[1] + dy


def state_token(agent: AgentState, width: int) -> int:
    x, y = agent.cell
    return (y * width + x) * 4 + agent.heading


def decode_state_token(token: int, width: int) -> tuple[tuple[int, int], int]:
    cell, heading = divmod(int(token), 4)
    return (cell % width, cell // width), heading


@dataclass(frozen=True)
class StepInfo:
    blocked: bool = False
    invalid: bool = False
    executed: int = -1  # action actually executed (differs under action noise)


@dataclass(frozen=True)
class EnvStep:
    grid: Grid
    next_state: AgentState
    reward: int
    done: bool
    info: StepInfo = field(default_factory=StepInfo)


def _transition(grid: Grid, agent: AgentState, a: int) -> tuple[Grid, AgentState, StepInfo]:
    a = Action(a)
    if a == Action.LEFT:
        return grid, replace(agent, heading=(agent.heading - 1) % 4), StepInfo(executed=a)
    if a == Action.RIGHT:
        return grid, replace(agent, heading=(agent.heading + 1) % 4), StepInfo(executed=a)
    fx, fy = agent.front
    if not grid.inside(fx, fy):
        return grid, agent, StepInfo(blocked=a == Action.FORWARD, invalid=a != Action.FORWARD, executed=a)
    front = grid.at(fx, fy)
    if a == Action.FORWARD:
        if front.passable:
            return grid, replace(agent, cell=(fx, fy)), StepInfo(executed=a)
        return grid, agent, StepInfo(blocked=True, executed=a)
    if a == Action.OPEN:
        if front.kind == Kind.DOOR and front.door == DoorState.CLOSED:
            return grid.with_cell(fx, fy, front._replace(door=DoorState.OPEN)), agent, StepInfo(executed=a)
        if front.kind == Kind.DOOR and front.door == DoorState.LOCKED:
            c = agent.carrying
            if c is not None and c.kind == Kind.KEY and c.color == front.color:
                return grid.with_cell(fx, fy, front._replace(door=DoorState.OPEN)), agent, StepInfo(executed=a)
        return grid, agent, StepInfo(invalid=True, executed=a)
    if a == Action.PICKUP:
        if agent.carrying is None and front.kind in (Kind.KEY, Kind.OBSTACLE):
            return grid.with_cell(fx, fy, FLOOR), replace(agent, carrying=front), StepInfo(executed=a)
        return grid, agent, StepInfo(invalid=True, executed=a)
    # DROP
    if agent.carrying is not None and front.kind == Kind.FLOOR:
        return grid.with_cell(fx, fy, agent.carrying), replace(agent, carrying=None), StepInfo(executed=a)
    return grid, agent, StepInfo(invalid=True, executed=a)


def step(grid: Grid, agent: AgentState, a: int, goals=frozenset(), stochastic: float = 0.0,
         rng: Optional[np.random.Generator] = None) -> EnvStep:
    """Apply one action.

    With ``stochastic = p`` the commanded action is replaced, with probability p,
    by one drawn uniformly from all six actions (possibly the same one).
    Reward is 1 exactly when the post-step cell is in ``goals``.
    """
    a = int(a)
    if not 0 <= a < N_ACTIONS:
        raise ValueError(f"unknown action {a}")
    if stochastic > 0.0:
        if rng is None:
            raise ValueError("stochastic mode needs an rng")
        if rng.random() < stochastic:
            a = int(rng.integers(N_ACTIONS))
    grid2, agent2, info = _transition(grid, agent, a)
    reward = int(agent2.cell in goals)
    return EnvStep(grid2, agent2, reward, bool(reward), info)


# --- missions ---------------------------------------------------------------

class SubgoalKind(enum.IntEnum):
    REACH = 0
    OPEN = 1
    PICKUP = 2


class Subgoal(NamedTuple):
    kind: SubgoalKind
    cell: tuple[int, int]


@dataclass(frozen=True)
class Mission:
    """Ordered subgoals; ``strict`` subgoals fail the mission if met out of order."""

    subgoals: tuple
    strict: bool = False

    @property
    def goal_cells(self) -> frozenset:
        return frozenset(g.cell for g in self.subgoals if g.kind == SubgoalKind.REACH)


def _achieved(sg: Subgoal, before: tuple[Grid, AgentState], after: tuple[Grid, AgentState]) -> bool:
    g0, a0 = before
    g1, a1 = after
    if sg.kind == SubgoalKind.REACH:
        return a1.cell == sg.cell
    if sg.kind == SubgoalKind.OPEN:
        c0, c1 = g0.at(*sg.cell), g1.at(*sg.cell)
        return c0.door != DoorState.OPEN and c1.door == DoorState.OPEN
    return g0.at(*sg.cell).kind != Kind.FLOOR and g1.at(*sg.cell).kind == Kind.FLOOR and a1.carrying is not None


def advance(mission: Mission, progress: int, before, after) -> tuple[int, bool]:
    """Return (new progress, failed) after a transition ``before -> after``."""
    if progress >= len(mission.subgoals):
        return progress, False
    if _achieved(mission.subgoals[progress], before, after):
        return progress + 1, False
    if mission.strict:
        for later in mission.subgoals[progress + 1:]:
            if _achieved(later, before, after):
                return progress, True
    return progress, False


@dataclass
class Episode:
    """Mutable episode wrapper that tracks mission progress."""

    grid: Grid
    agent: AgentState
    mission: Mission
    progress: int = 0
    failed: bool = False
    steps: int = 0

    def __post_init__(self):
        # already standing on a reach subgoal counts as achieved
        while (self.progress < len(self.mission.subgoals)
               and self.mission.subgoals[self.progress].kind == SubgoalKind.REACH
               and self.mission.subgoals[self.progress].cell == self.agent.cell):
            self.progress += 1

    @property
    def success(self) -> bool:
        return self.progress >= len(self.mission.subgoals)

    @property
    def done(self) -> bool:
        return self.success or self.failed

    @property
    def active_subgoal(self) -> Optional[Subgoal]:
        if self.success:
            return None
        return self.mission.subgoals[self.progress]

    def step(self, a: int, stochastic: float = 0.0, rng=None) -> EnvStep:
        out = step(self.grid, self.agent, a, self.mission.goal_cells, stochastic, rng)
        before, after = (self.grid, self.agent), (out.grid, out.next_state)
        prev = self.progress
        self.progress, failed = advance(self.mission, self.progress, before, after)
        self.failed = self.failed or failed
        self.grid, self.agent = out.grid, out.next_state
        self.steps += 1
        return replace(out, reward=int(self.progress > prev), done=self.done)
