from .env import (
    COLORS,
    N_ACTIONS,
    Action,
    AgentState,
    Cell,
    DoorState,
    EnvStep,
    Episode,
    Grid,
    Kind,
    Mission,
    Subgoal,
    SubgoalKind,
    decode_state_token,
    parse_dump,
    state_token,
    step,
)
from .expert import Demonstration, Unsolvable, expert_demo, goal_token, optimal_actions, shortest_length
from .encode import N_CHANNELS, ObservationEncoding, encode_observation
from .dataset import DatasetError, load_dataset, serialize_dataset
from .tasks import AP, IC, N_INSTRUCTIONS, TP, Task, TaskFamily, generate_task, generate_tasks

__all__ = [
    "COLORS", "N_ACTIONS", "Action", "AgentState", "Cell", "DoorState", "EnvStep", "Episode", "Grid",
    "Kind", "Mission", "Subgoal", "SubgoalKind", "decode_state_token", "parse_dump", "state_token", "step",
    "Demonstration", "Unsolvable", "expert_demo", "goal_token", "optimal_actions", "shortest_length",
    "N_CHANNELS", "ObservationEncoding", "encode_observation",
    "DatasetError", "load_dataset", "serialize_dataset",
    "AP", "IC", "N_INSTRUCTIONS", "TP", "Task", "TaskFamily", "generate_task", "generate_tasks",
]
