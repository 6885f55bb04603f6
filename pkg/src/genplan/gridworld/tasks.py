"""Task-family generators and the templated instruction vocabulary."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import (
    FLOOR,
    N_COLORS,
    OBSTACLE,
    WALL,
    AgentState,
    DoorState,
    Grid,
    Kind,
    Mission,
    Subgoal,
    SubgoalKind,
    door,
    goal,
    key,
)
from .expert import Unsolvable, shortest_length

# --- instructions -----------------------------------------------------------

_PAIRS = [p for p in itertools.permutations(range(N_COLORS), 2)]
GOTO, GOTO_SEQ, OPEN_ORDER, UNBLOCK_GOTO, KEY_CORRIDOR = 0, 6, 36, 66, 72
N_INSTRUCTIONS = 78


def instruction_goto(c: int) -> int:
    return GOTO + c


def instruction_goto_seq(c1: int, c2: int) -> int:
    return GOTO_SEQ + _PAIRS.index((c1, c2))


def instruction_open_order(c1: int, c2: int) -> int:
    return OPEN_ORDER + _PAIRS.index((c1, c2))


def instruction_unblock_goto(c: int) -> int:
    return UNBLOCK_GOTO + c


def instruction_key_corridor(c: int) -> int:
    return KEY_CORRIDOR + c


def describe_instruction(iid: int) -> str:
    if not 0 <= iid < N_INSTRUCTIONS:
        raise ValueError(f"unknown instruction id {iid}")
    from .env import COLORS
    if iid < GOTO_SEQ:
        return f"go to the {COLORS[iid]} goal"
    if iid < OPEN_ORDER:
        a, b = _PAIRS[iid - GOTO_SEQ]
        return f"go to the {COLORS[a]} goal, then the {COLORS[b]} goal"
    if iid < UNBLOCK_GOTO:
        a, b = _PAIRS[iid - OPEN_ORDER]
        return f"open the {COLORS[a]} door, then the {COLORS[b]} door"
    if iid < KEY_CORRIDOR:
        return f"clear the way and go to the {COLORS[iid - UNBLOCK_GOTO]} goal"
    return f"fetch the key, unlock the door and go to the {COLORS[iid - KEY_CORRIDOR]} goal"


# --- families -----------------------------------------------------------------

TP, IC, AP = "TP", "IC", "AP"
VARIANTS = {
    TP: ("maze",),
    IC: ("key_corridor", "blocked_goal", "door_order"),
    AP: ("blocked", "doors", "maze"),
}


@dataclass(frozen=True)
class TaskFamily:
    """Generator parameters.

    The grid side is ``rows * (room_size - 1) + 1``: ``rows`` rooms per side that
    share their walls. ``rows = 1`` gives a single planar room.
    """

    kind: str = TP
    room_size: int = 4
    rows: int = 2
    n_obstacles: int = 0
    n_goals: int = 1
    variant: str = "maze"
    horizon: int = 20
    jitter: bool = True
    extra_openings: float = 0.25

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown task family {self.kind!r}")
        if self.variant not in VARIANTS[self.kind]:
            raise ValueError(f"variant {self.variant!r} not available for {self.kind}")
        if self.room_size < 3 or self.rows < 1:
            raise ValueError("room_size must be >= 3 and rows >= 1")
        if self.size > 25:
            raise ValueError("grid side above 25 is not supported")
        if not 1 <= self.n_goals <= 2:
            raise ValueError("the instruction vocabulary covers 1 or 2 goals")
        if self.n_obstacles < 0 or self.n_obstacles > (self.size - 2) ** 2 // 4:
            raise ValueError("too many obstacles for the grid")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.variant != "maze" and self.size < 5:
            raise ValueError(f"variant {self.variant!r} needs a grid side of at least 5")
        if self.variant in ("doors",) and self.rows < 2:
            raise ValueError("door mazes need rows >= 2")

    @property
    def size(self) -> int:
        return self.rows * (self.room_size - 1) + 1

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.variant}-S{self.room_size}R{self.rows}N{self.n_obstacles}G{self.n_goals}"

    def training_family(self) -> "TaskFamily":
        """Family used for training; for AP it is the planar single-goal room of the same size."""
        if self.kind != AP:
            return self
        return TaskFamily(TP, room_size=self.size, rows=1, n_obstacles=0, n_goals=1,
                          variant="maze", horizon=self.horizon)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Task:
    grid: Grid
    agent: AgentState
    mission: Mission
    instruction_id: int
    family: TaskFamily = field(default_factory=TaskFamily)

    @property
    def goals(self) -> frozenset:
        return self.mission.goal_cells


# --- layout helpers -----------------------------------------------------------

def _line_positions(n_lines: int, base: int, size: int, jitter: bool, rng) -> list[int]:
    pos = [(k + 1) * base for k in range(n_lines)]
    if jitter:
        for k in range(n_lines):
            lo = (pos[k - 1] if k else 0) + 2
            hi = (pos[k + 1] if k + 1 < n_lines else size - 1) - 2
            cand = [p for p in (pos[k] - 1, pos[k], pos[k] + 1) if lo <= p <= hi]
            pos[k] = int(rng.choice(cand))
    return pos


def _maze(fam: TaskFamily, rng, door_openings: bool = False) -> tuple[Grid, set]:
    """Rooms on a ``rows x rows`` lattice joined by a random spanning tree of openings."""
    n = fam.size
    grid = Grid.empty(n, n)
    r = fam.rows
    if r == 1:
        return grid, set()
    xs = [0] + _line_positions(r - 1, fam.room_size - 1, n, fam.jitter, rng) + [n - 1]
    ys = [0] + _line_positions(r - 1, fam.room_size - 1, n, fam.jitter, rng) + [n - 1]
    upd = {}
    for x in xs[1:-1]:
        for y in range(n):
            upd[(x, y)] = WALL
    for y in ys[1:-1]:
        for x in range(n):
            upd[(x, y)] = WALL
    # room graph edges: ((i, j), (i', j'), candidate opening cells)
    edges = []
    for i in range(r):
        for j in range(r):
            if i + 1 < r:  # horizontal neighbour across x = xs[i+1]
                edges.append(((i, j), (i + 1, j), [(xs[i + 1], y) for y in range(ys[j] + 1, ys[j + 1])]))
            if j + 1 < r:
                edges.append(((i, j), (i, j + 1), [(x, ys[j + 1]) for x in range(xs[i] + 1, xs[i + 1])]))
    order = rng.permutation(len(edges))
    parent = {(i, j): (i, j) for i in range(r) for j in range(r)}

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    openings = set()
    for e in order:
        u, v, cells = edges[e]
        ru, rv = find(u), find(v)
        if ru != rv or rng.random() < fam.extra_openings:
            parent[ru] = rv
            c = cells[int(rng.integers(len(cells)))]
            openings.add(c)
            upd[c] = door(int(rng.integers(N_COLORS)), DoorState.CLOSED) if door_openings else FLOOR
    rooms = tuple((xs[i] + 1, ys[j] + 1, xs[i + 1] - 1, ys[j + 1] - 1) for j in range(r) for i in range(r))
    g = grid.with_cells(upd)
    return Grid(g.width, g.height, g.cells, rooms), openings


def _free_cells(grid: Grid, exclude: set) -> list[tuple[int, int]]:
    return [(x, y) for y in range(grid.height) for x in range(grid.width)
            if grid.at(x, y).kind == Kind.FLOOR and (x, y) not in exclude]


def _doorway_neighbours(grid: Grid, openings: set) -> set:
    out = set()
    for (x, y) in openings:
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            out.add((x + dx, y + dy))
    return out | set(openings)


def _pick(rng, cells: list, k: int) -> list:
    if len(cells) < k:
        raise Unsolvable("not enough free cells")
    idx = rng.choice(len(cells), size=k, replace=False)
    return [cells[i] for i in idx]


def _split_line(n: int, rng) -> tuple[bool, int]:
    """Random full-length wall line leaving at least one interior column/row on each side."""
    vertical = bool(rng.integers(2))
    pos = int(rng.integers(2, n - 2))
    return vertical, pos


def _line_cells(n: int, vertical: bool, pos: int) -> list[tuple[int, int]]:
    return [(pos, y) if vertical else (y, pos) for y in range(1, n - 1)]


def _side(cell, vertical: bool, pos: int) -> int:
    c = cell[0] if vertical else cell[1]
    return 0 if c < pos else 1


def _agent(rng, cell) -> AgentState:
    return AgentState(tuple(cell), int(rng.integers(4)))


# --- generators ---------------------------------------------------------------

def _gen_maze(fam: TaskFamily, rng, doors: bool = False) -> Task:
    grid, openings = _maze(fam, rng, door_openings=doors)
    keep_clear = _doorway_neighbours(grid, openings)
    cells = _free_cells(grid, openings)
    colors = rng.choice(N_COLORS, size=fam.n_goals, replace=False).tolist()
    picks = _pick(rng, cells, fam.n_goals + 1)
    agent_cell, goal_cells = picks[0], picks[1:]
    upd = {c: goal(col) for c, col in zip(goal_cells, colors)}
    taken = set(picks) | keep_clear
    obs_cells = _pick(rng, _free_cells(grid, taken), fam.n_obstacles) if fam.n_obstacles else []
    upd.update({c: OBSTACLE for c in obs_cells})
    grid = grid.with_cells(upd)
    mission = Mission(tuple(Subgoal(SubgoalKind.REACH, c) for c in goal_cells))
    iid = instruction_goto(colors[0]) if fam.n_goals == 1 else instruction_goto_seq(*colors)
    return Task(grid, _agent(rng, agent_cell), mission, iid, fam)


def _gen_blocked(fam: TaskFamily, rng, unblock_instruction: bool) -> Task:
    n = fam.size
    grid = Grid.empty(n, n)
    vertical, pos = _split_line(n, rng)
    line = _line_cells(n, vertical, pos)
    gap = line[int(rng.integers(len(line)))]
    upd = {c: WALL for c in line}
    upd[gap] = OBSTACLE
    grid = grid.with_cells(upd)
    free = _free_cells(grid, _doorway_neighbours(grid, {gap}))
    a_side = int(rng.integers(2))
    agent_cell = _pick(rng, [c for c in free if _side(c, vertical, pos) == a_side], 1)[0]
    goal_cell = _pick(rng, [c for c in free if _side(c, vertical, pos) != a_side], 1)[0]
    col = int(rng.integers(N_COLORS))
    grid = grid.with_cell(*goal_cell, goal(col))
    extra = fam.n_obstacles - 1
    if extra > 0:
        rest = _free_cells(grid, {agent_cell, goal_cell} | _doorway_neighbours(grid, {gap}))
        grid = grid.with_cells({c: OBSTACLE for c in _pick(rng, rest, extra)})
    if unblock_instruction:
        mission = Mission((Subgoal(SubgoalKind.PICKUP, gap), Subgoal(SubgoalKind.REACH, goal_cell)))
        iid = instruction_unblock_goto(col)
    else:
        mission = Mission((Subgoal(SubgoalKind.REACH, goal_cell),))
        iid = instruction_goto(col)
    return Task(grid, _agent(rng, agent_cell), mission, iid, fam)


def _gen_key_corridor(fam: TaskFamily, rng) -> Task:
    n = fam.size
    grid = Grid.empty(n, n)
    vertical, pos = _split_line(n, rng)
    line = _line_cells(n, vertical, pos)
    dcell = line[int(rng.integers(len(line)))]
    col = int(rng.integers(N_COLORS))
    upd = {c: WALL for c in line}
    upd[dcell] = door(col, DoorState.LOCKED)
    grid = grid.with_cells(upd)
    free = _free_cells(grid, _doorway_neighbours(grid, {dcell}))
    a_side = int(rng.integers(2))
    near = [c for c in free if _side(c, vertical, pos) == a_side]
    far = [c for c in free if _side(c, vertical, pos) != a_side]
    agent_cell, key_cell = _pick(rng, near, 2)
    goal_cell = _pick(rng, far, 1)[0]
    gcol = int(rng.integers(N_COLORS))
    grid = grid.with_cells({key_cell: key(col), goal_cell: goal(gcol)})
    mission = Mission((Subgoal(SubgoalKind.PICKUP, key_cell), Subgoal(SubgoalKind.OPEN, dcell),
                       Subgoal(SubgoalKind.REACH, goal_cell)))
    return Task(grid, _agent(rng, agent_cell), mission, instruction_key_corridor(gcol), fam)


def _gen_door_order(fam: TaskFamily, rng) -> Task:
    n = fam.size
    grid = Grid.empty(n, n)
    vertical, pos = _split_line(n, rng)
    line = _line_cells(n, vertical, pos)
    d1, d2 = _pick(rng, line, 2)
    c1, c2 = rng.choice(N_COLORS, size=2, replace=False).tolist()
    upd = {c: WALL for c in line}
    upd[d1] = door(c1, DoorState.CLOSED)
    upd[d2] = door(c2, DoorState.CLOSED)
    grid = grid.with_cells(upd)
    free = _free_cells(grid, _doorway_neighbours(grid, {d1, d2}))
    a_side = int(rng.integers(2))
    agent_cell = _pick(rng, [c for c in free if _side(c, vertical, pos) == a_side], 1)[0]
    mission = Mission((Subgoal(SubgoalKind.OPEN, d1), Subgoal(SubgoalKind.OPEN, d2)), strict=True)
    return Task(grid, _agent(rng, agent_cell), mission, instruction_open_order(c1, c2), fam)


def _generate_once(fam: TaskFamily, rng) -> Task:
    v = fam.variant
    if v == "maze":
        return _gen_maze(fam, rng)
    if v == "doors":
        return _gen_maze(fam, rng, doors=True)
    if v == "blocked":
        return _gen_blocked(fam, rng, unblock_instruction=False)
    if v == "blocked_goal":
        return _gen_blocked(fam, rng, unblock_instruction=True)
    if v == "key_corridor":
        return _gen_key_corridor(fam, rng)
    return _gen_door_order(fam, rng)


def generate_task(family: TaskFamily, rng: np.random.Generator, max_tries: int = 200,
                  check: bool = True) -> Task:
    """Sample an instance whose shortest expert solution fits within ``family.horizon``."""
    for _ in range(max_tries):
        try:
            task = _generate_once(family, rng)
            if not check:
                return task
            length = shortest_length(task.grid, task.agent, task.mission)
        except Unsolvable:
            continue
        if 1 <= length <= family.horizon:
            return task
    raise ValueError(f"could not generate a solvable {family.name} instance within horizon "
                     f"{family.horizon}; parameters look unsatisfiable")


def generate_tasks(family: TaskFamily, n: int, seed: int, exclude: Optional[set] = None) -> list[Task]:
    """``n`` instances from independent child streams of ``seed``.

    ``exclude`` holds instance keys (see :func:`instance_key`) to reject, which is how
    evaluation guarantees instances unseen during training.
    """
    out = []
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(n):
        rng = np.random.default_rng(child)
        while True:
            t = generate_task(family, rng)
            if exclude is None or instance_key(t) not in exclude:
                break
        out.append(t)
    return out


def instance_key(task: Task) -> tuple:
    return task.grid.cells, task.agent, task.mission
