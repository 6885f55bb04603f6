"""Breadth-first expert over (cell, heading, inventory, grid contents, mission progress)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .env import (
    N_ACTIONS,
    AgentState,
    Episode,
    Grid,
    Mission,
    advance,
    state_token,
    step,
)


class Unsolvable(RuntimeError):
    pass


def _successors(grid: Grid, agent: AgentState, mission: Mission, progress: int):
    for a in range(N_ACTIONS):
        out = step(grid, agent, a)
        if out.grid is grid and out.next_state == agent:
            continue  # no-op
        prog, failed = advance(mission, progress, (grid, agent), (out.grid, out.next_state))
        if failed:
            continue
        yield a, (out.grid, out.next_state, prog)


def _initial_progress(grid: Grid, agent: AgentState, mission: Mission) -> int:
    return Episode(grid, agent, mission).progress


def optimal_layers(grid: Grid, agent: AgentState, mission: Mission, progress: Optional[int] = None,
                   max_depth: int = 200, max_nodes: int = 500_000):
    """Layered BFS up to the first depth where the mission completes.

    Returns ``(depth, good, edges)`` where ``good[k]`` holds the configurations at
    depth k that lie on some shortest solution and ``edges[node]`` lists
    ``(action, child)`` pairs into the next layer.
    """
    if progress is None:
        progress = _initial_progress(grid, agent, mission)
    n_goals = len(mission.subgoals)
    start = (grid, agent, progress)
    if progress >= n_goals:
        return 0, [{start}], {}
    seen = {start}
    layers = [[start]]
    edges: dict = {}
    solved: set = set()
    while not solved:
        if len(layers) > max_depth or len(seen) > max_nodes:
            raise Unsolvable(f"no solution within depth {max_depth} / {max_nodes} nodes")
        nxt: list = []
        fresh: set = set()  # children first discovered in this layer, possibly via several parents
        for node in layers[-1]:
            out = []
            for a, child in _successors(node[0], node[1], mission, node[2]):
                if child in seen and child not in fresh:
                    continue
                out.append((a, child))
                if child not in fresh:
                    seen.add(child)
                    fresh.add(child)
                    nxt.append(child)
                    if child[2] >= n_goals:
                        solved.add(child)
            edges[node] = out
        if not nxt:
            raise Unsolvable("mission unreachable from the start configuration")
        layers.append(nxt)
    depth = len(layers) - 1
    good = [set() for _ in range(depth + 1)]
    good[depth] = solved
    for k in range(depth - 1, -1, -1):
        good[k] = {n for n in layers[k] if any(c in good[k + 1] for _, c in edges.get(n, ()))}
    return depth, good, edges


def shortest_length(grid: Grid, agent: AgentState, mission: Mission, progress: Optional[int] = None) -> int:
    return optimal_layers(grid, agent, mission, progress)[0]


def optimal_actions(grid: Grid, agent: AgentState, mission: Mission, progress: int) -> list[int]:
    """All first actions of shortest solutions from this configuration."""
    depth, good, edges = optimal_layers(grid, agent, mission, progress)
    if depth == 0:
        return []
    start = (grid, agent, progress)
    return sorted({a for a, c in edges[start] if c in good[1]})


def _sample_shortest(ep: Episode, rng: Optional[np.random.Generator]) -> list[int]:
    """One shortest action sequence, drawn uniformly among optimal actions at each step."""
    depth, good, edges = optimal_layers(ep.grid, ep.agent, ep.mission, ep.progress)
    node = (ep.grid, ep.agent, ep.progress)
    out = []
    for k in range(depth):
        acts = sorted(a for a, c in edges[node] if c in good[k + 1])
        a = acts[0] if rng is None else int(rng.choice(acts))
        node = next(c for b, c in edges[node] if b == a and c in good[k + 1])
        out.append(a)
    return out


@dataclass
class Demonstration:
    """Expert trajectory; ``states[k]``/``goals[k]`` are observed before ``actions[k]``."""

    grid: Grid
    agent: AgentState
    mission: Mission
    instruction_id: int
    states: list
    actions: list
    goals: list
    corrupted_steps: tuple = ()

    def __len__(self) -> int:
        return len(self.actions)

    def replay(self):
        """Yield ``(grid, agent, progress)`` before every action, then the final one."""
        ep = Episode(self.grid, self.agent, self.mission)
        for a in self.actions:
            yield ep.grid, ep.agent, ep.progress
            ep.step(a)
        yield ep.grid, ep.agent, ep.progress

    def final_episode(self) -> Episode:
        ep = Episode(self.grid, self.agent, self.mission)
        for a in self.actions:
            ep.step(a)
        return ep


def goal_token(episode_or_none, width: int, height: int) -> int:
    """Cell index of the active subgoal, or the null-goal token ``width*height``."""
    sg = None if episode_or_none is None else episode_or_none.active_subgoal
    if sg is None:
        return width * height
    x, y = sg.cell
    return y * width + x


def _record(ep: Episode, a: int, states: list, actions: list, goals: list) -> None:
    states.append(state_token(ep.agent, ep.grid.width))
    goals.append(goal_token(ep, ep.grid.width, ep.grid.height))
    actions.append(int(a))
    ep.step(a)


def expert_demo(grid: Grid, agent: AgentState, mission: Mission, instruction_id: int,
                rng: Optional[np.random.Generator] = None, corruption: float = 0.0,
                max_len: Optional[int] = None, max_tries: int = 50) -> Demonstration:
    """Shortest demonstration; ties between optimal actions are broken by ``rng``.

    With ``corruption = f`` exactly ``ceil(f * L)`` of the first decisions (L = clean
    length) are replaced by a random non-optimal action, and the expert replans
    from wherever that leaves the agent. ``max_len`` rejects corrupted attempts
    that grow too long.
    """
    if corruption and rng is None:
        raise ValueError("corruption needs an rng")
    n_bad = 0
    if corruption > 0:
        clean_len = shortest_length(grid, agent, mission)
        n_bad = math.ceil(corruption * clean_len)
    for _ in range(max_tries):
        bad = set(rng.choice(clean_len, size=n_bad, replace=False).tolist()) if n_bad else set()
        ep = Episode(grid, agent, mission)
        states, actions, goals = [], [], []
        plan: list = []  # remaining optimal actions, invalidated by every corrupted decision
        decision = 0
        while not ep.done:
            if decision in bad:
                opts = optimal_actions(ep.grid, ep.agent, ep.mission, ep.progress)
                a = int(rng.choice([a for a in range(N_ACTIONS) if a not in opts]))
                plan = []
            else:
                if not plan:
                    plan = _sample_shortest(ep, rng)
                a = plan.pop(0)
            _record(ep, a, states, actions, goals)
            decision += 1
            if ep.failed:
                break
        if ep.success and (max_len is None or len(actions) <= max_len):
            return Demonstration(grid, agent, mission, instruction_id, states, actions, goals,
                                 tuple(sorted(bad)))
        if not n_bad:
            break
    raise Unsolvable("could not produce a demonstration within the length limit")
