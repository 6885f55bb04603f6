"""Fully observable one-hot grid encoding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .env import N_COLORS, AgentState, DoorState, Grid, Kind, state_token

# channel layout
CH_FLOOR, CH_WALL, CH_DOOR_OPEN, CH_DOOR_CLOSED, CH_DOOR_LOCKED, CH_KEY, CH_OBSTACLE, CH_GOAL = range(8)
CH_COLOR = 8  # 6 colour channels for doors, keys and goals
CH_AGENT = CH_COLOR + N_COLORS
CH_HEADING = CH_AGENT + 1  # 4 heading channels, set on the agent cell
CH_CARRY_KEY = CH_HEADING + 4
CH_CARRY_OBSTACLE = CH_CARRY_KEY + 1
N_CHANNELS = CH_CARRY_OBSTACLE + 1
AGENT_CHANNELS = tuple(range(CH_AGENT, N_CHANNELS))

_KIND_CH = {Kind.FLOOR: CH_FLOOR, Kind.WALL: CH_WALL, Kind.KEY: CH_KEY,
            Kind.OBSTACLE: CH_OBSTACLE, Kind.GOAL: CH_GOAL}
_DOOR_CH = {DoorState.OPEN: CH_DOOR_OPEN, DoorState.CLOSED: CH_DOOR_CLOSED, DoorState.LOCKED: CH_DOOR_LOCKED}


@dataclass
class ObservationEncoding:
    grid: np.ndarray  # (W, H, C) float32
    agent_token: int
    instruction_id: int
    t: float = 0.0
    goal_hint: Optional[np.ndarray] = None  # oracle goal tokens, evaluation-only

    @property
    def width(self) -> int:
        return self.grid.shape[0]

    @property
    def height(self) -> int:
        return self.grid.shape[1]


def encode_grid(grid: Grid, agent: AgentState) -> np.ndarray:
    out = np.zeros((grid.width, grid.height, N_CHANNELS), dtype=np.float32)
    for y in range(grid.height):
        for x in range(grid.width):
            c = grid.at(x, y)
            if c.kind == Kind.DOOR:
                out[x, y, _DOOR_CH[c.door]] = 1.0
            else:
                out[x, y, _KIND_CH[c.kind]] = 1.0
            if c.kind in (Kind.DOOR, Kind.KEY, Kind.GOAL):
                out[x, y, CH_COLOR + c.color] = 1.0
    ax, ay = agent.cell
    out[ax, ay, CH_AGENT] = 1.0
    out[ax, ay, CH_HEADING + agent.heading] = 1.0
    if agent.carrying is not None:
        ch = CH_CARRY_KEY if agent.carrying.kind == Kind.KEY else CH_CARRY_OBSTACLE
        out[ax, ay, ch] = 1.0
    return out


def encode_observation(grid: Grid, agent: AgentState, instruction_id: int, t: float = 0.0,
                       goal_hint=None) -> ObservationEncoding:
    return ObservationEncoding(encode_grid(grid, agent), state_token(agent, grid.width),
                               int(instruction_id), float(t),
                               None if goal_hint is None else np.asarray(goal_hint, dtype=np.int64))
