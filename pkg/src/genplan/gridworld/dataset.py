"""Newline-delimited JSON demonstration files.

Line 1 is a header ``{"format": ..., "version": ..., "count": ...}``; each further
line holds one demonstration.
"""
from __future__ import annotations

import json
import os
from typing import Iterable, Optional

from .env import AgentState, Cell, DoorState, Grid, Kind, Mission, Subgoal, SubgoalKind
from .expert import Demonstration

FORMAT = "genplan-demos"
VERSION = 1


class DatasetError(ValueError):
    pass


def _cell_to_list(c: Cell) -> list:
    return [int(c.kind), int(c.color), int(c.door)]


def _cell_from_list(v) -> Cell:
    return Cell(Kind(v[0]), int(v[1]), DoorState(v[2]))


def demo_to_record(d: Demonstration) -> dict:
    g, a = d.grid, d.agent
    return {
        "width": g.width,
        "height": g.height,
        "cells": [_cell_to_list(c) for c in g.cells],
        "rooms": [list(r) for r in g.rooms],
        "agent": [a.cell[0], a.cell[1], a.heading,
                  None if a.carrying is None else _cell_to_list(a.carrying)],
        "mission": {"strict": d.mission.strict,
                    "subgoals": [[int(s.kind), s.cell[0], s.cell[1]] for s in d.mission.subgoals]},
        "instruction_id": int(d.instruction_id),
        "states": [int(s) for s in d.states],
        "actions": [int(s) for s in d.actions],
        "goals": [int(s) for s in d.goals],
        "corrupted_steps": [int(s) for s in d.corrupted_steps],
    }


def demo_from_record(r: dict) -> Demonstration:
    grid = Grid(int(r["width"]), int(r["height"]), tuple(_cell_from_list(c) for c in r["cells"]),
                tuple(tuple(x) for x in r["rooms"]))
    ax, ay, heading, carry = r["agent"]
    agent = AgentState((int(ax), int(ay)), int(heading), None if carry is None else _cell_from_list(carry))
    m = r["mission"]
    mission = Mission(tuple(Subgoal(SubgoalKind(k), (int(x), int(y))) for k, x, y in m["subgoals"]),
                      bool(m["strict"]))
    if not len(r["states"]) == len(r["actions"]) == len(r["goals"]):
        raise ValueError("stream lengths differ")
    return Demonstration(grid, agent, mission, int(r["instruction_id"]), list(r["states"]),
                         list(r["actions"]), list(r["goals"]), tuple(r.get("corrupted_steps", ())))


def serialize_dataset(demos: Iterable[Demonstration], path, meta: Optional[dict] = None) -> None:
    demos = list(demos)
    header = {"format": FORMAT, "version": VERSION, "count": len(demos), "meta": meta or {}}
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for d in demos:
            f.write(json.dumps(demo_to_record(d), sort_keys=True, separators=(",", ":")) + "\n")
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    return _parse_header(first)


def _parse_header(line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetError(f"unreadable dataset header: {e}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise DatasetError("not a demonstration file")
    if header.get("version") != VERSION:
        raise DatasetError(f"dataset version {header.get('version')} is not supported (expected {VERSION})")
    return header


def load_dataset(path, with_header: bool = False):
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if not lines or not lines[0].strip():
        raise DatasetError("empty file: missing header")
    header = _parse_header(lines[0])
    body = lines[1:]
    if body and body[-1] == "":
        body = body[:-1]
    demos = []
    for i, line in enumerate(body):
        try:
            demos.append(demo_from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"record {i} is corrupt or truncated: {e}") from None
    if len(demos) != header["count"]:
        raise DatasetError(f"header announces {header['count']} records, found {len(demos)}")
    return (demos, header) if with_header else demos
