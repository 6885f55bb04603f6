"""Joint plan sampling, replanning rollouts, the BC baseline and evaluation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import dfm
from .dfm import InterpolantKind
from .gridworld.encode import encode_grid
from .gridworld.env import Episode, Mission, state_token
from .gridworld.expert import Unsolvable, expert_demo
from .gridworld.tasks import Task, TaskFamily, generate_task, instance_key
from .net import ArchConfig, BCModel, DenoiserInput, ParamStore, loss_grads, optimizer_step
from .train import PAD_ACTION, STREAMS, TrainConfig, TrajectorySet, energy, fit, lr_at, pad_streams, spaces


@dataclass
class PlanConfig:
    horizon: int = 20
    I_max: Optional[int] = None  # default ceil(H / 2)
    interpolant: str = "mask"
    replan_mode: str = "multi_step"  # or "single_step"
    replan_every: Optional[int] = None  # default ceil(H / 4) in multi_step mode
    ctx: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.I_max is None:
            self.I_max = math.ceil(self.horizon / 2)
        if self.I_max < 1:
            raise ValueError("I_max must be >= 1")
        if self.replan_mode not in ("multi_step", "single_step"):
            raise ValueError(f"unknown replan_mode {self.replan_mode!r}")
        InterpolantKind(self.interpolant)

    @property
    def dt(self) -> float:
        return 1.0 / self.I_max

    @property
    def k(self) -> int:
        if self.replan_mode == "single_step":
            return 1
        return self.replan_every or math.ceil(self.horizon / 4)


@dataclass
class ObsBatch:
    grid: np.ndarray
    agent: np.ndarray
    instruction: np.ndarray
    context: Optional[np.ndarray] = None
    goal_hint: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.agent)

    @classmethod
    def from_episodes(cls, eps: Sequence[Episode], instructions: Sequence[int], goal_hint=None) -> "ObsBatch":
        return cls(np.stack([encode_grid(e.grid, e.agent) for e in eps]),
                   np.asarray([state_token(e.agent, e.grid.width) for e in eps], dtype=np.int64),
                   np.asarray(instructions, dtype=np.int64), None,
                   None if goal_hint is None else np.asarray(goal_hint, dtype=np.int64))


def _rows_random(rngs: Sequence[np.random.Generator], shape) -> np.ndarray:
    return np.stack([r.random(shape) for r in rngs])


@torch.no_grad()
def plan(model, obs: ObsBatch, cfg: PlanConfig, rngs: Sequence[np.random.Generator]):
    """Sample ``(actions, states, goals)``, each ``(B, H)``, by joint reverse-CTMC simulation.

    ``rngs`` holds one generator per row so each episode's draws do not depend on
    what else shares the batch.
    """
    arch: ArchConfig = model.arch
    kind = InterpolantKind(cfg.interpolant)
    sp = spaces(arch, kind)
    B, H = len(obs), arch.horizon
    if len(rngs) != B:
        raise ValueError("need one rng per row")
    x = {}
    for k in STREAMS:
        if kind is InterpolantKind.MASK:
            x[k] = dfm.noise_sample(kind, sp[k], (B, H), rngs[0])
        else:
            x[k] = np.stack([dfm.noise_sample(kind, sp[k], (H,), r) for r in rngs])
    grid = torch.from_numpy(obs.grid)
    agent = torch.from_numpy(obs.agent)
    instr = torch.from_numpy(obs.instruction)
    ctx = None if obs.context is None else torch.from_numpy(obs.context)
    hint = None if obs.goal_hint is None else torch.from_numpy(obs.goal_hint)
    model.eval()
    for i in range(cfg.I_max):
        t = i * cfg.dt
        inp = DenoiserInput(torch.from_numpy(x["states"]), torch.from_numpy(x["actions"]),
                            torch.from_numpy(x["goals"]), grid, agent, instr,
                            torch.full((B,), t, dtype=torch.float32), ctx, hint)
        out = model(inp).streams()
        last = kind is InterpolantKind.MASK and i == cfg.I_max - 1
        for k in STREAMS:
            probs = F.softmax(out[k].double(), -1).numpy()
            if last:
                x[k] = dfm.finalize(kind, sp[k], probs, x[k])
            else:
                x[k] = dfm.reverse_step(kind, sp[k], probs, x[k], t, cfg.dt, _rows_random(rngs, (H,)))
    return x["actions"], x["states"], x["goals"]


# --- BC baseline ---------------------------------------------------------------

class BCPlanner:
    def __init__(self, model: BCModel):
        self.model = model
        self.arch = model.arch

    @torch.no_grad()
    def plan(self, obs: ObsBatch, cfg: PlanConfig, rngs=None):
        """Greedy decode: a_k from s_1..s_k, a_1..a_{k-1}; s_{k+1} from the model's own prediction."""
        self.model.eval()
        H = self.arch.horizon
        grid, agent, instr = (torch.from_numpy(v) for v in (obs.grid, obs.agent, obs.instruction))
        states = agent[:, None].clone()
        actions = torch.zeros(len(obs), 0, dtype=torch.long)
        for k in range(H):
            a_logits, _ = self.model(grid, agent, instr, states, actions)
            actions = torch.cat([actions, a_logits[:, -1].argmax(-1, keepdim=True)], 1)
            if k + 1 < H:
                _, s_logits = self.model(grid, agent, instr, states, actions)
                states = torch.cat([states, s_logits[:, -1].argmax(-1, keepdim=True)], 1)
        goals = np.full((len(obs), H), self.arch.n_goals - 1)
        return actions.numpy(), states.numpy(), goals


def bc_loss(model: BCModel, batch: TrajectorySet) -> torch.Tensor:
    g, a, i = (torch.from_numpy(v) for v in (batch.grid, batch.agent, batch.instruction))
    s = torch.from_numpy(batch.states)
    act = torch.from_numpy(batch.actions)
    a_logits, s_logits = model(g, a, i, s, act[:, :-1])
    la = F.cross_entropy(a_logits.transpose(1, 2), act)
    ls = F.cross_entropy(s_logits.transpose(1, 2), s[:, 1:])
    return la + ls


def bc_baseline_train(data: TrajectorySet, cfg: TrainConfig, arch: ArchConfig, verbose: bool = False):
    """Cross-entropy next-action (and next-state) training with the GenPlan budget."""
    torch.manual_seed(cfg.seed)
    model = BCModel(arch)
    store = ParamStore(model)
    rng = np.random.default_rng([cfg.seed, 0])
    order, pos = rng.permutation(len(data)), 0
    log = []
    for step in range(cfg.max_iters):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(data)), 0
        batch = data.subset(np.sort(order[pos:pos + cfg.batch_size]))
        pos += cfg.batch_size
        model.train()
        loss = bc_loss(model, batch)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite BC loss at step {step}")
        optimizer_step(store, loss_grads(store, loss), lr_at(cfg, step), clip_norm=cfg.clip_norm)
        log.append({"step": step + 1, "loss": float(loss.detach())})
        if verbose and (step + 1) % 500 == 0:
            print(f"bc step {step + 1}: loss={float(loss.detach()):.4f}", flush=True)
    model.eval()
    return model, store, log


def bc_baseline_plan(model: BCModel, obs: ObsBatch, cfg: PlanConfig) -> np.ndarray:
    return BCPlanner(model).plan(obs, cfg)[0]


class GenPlanner:
    def __init__(self, model):
        self.model = model
        self.arch = model.arch

    def plan(self, obs: ObsBatch, cfg: PlanConfig, rngs):
        return plan(self.model, obs, cfg, rngs)


def as_planner(model):
    return BCPlanner(model) if isinstance(model, BCModel) else GenPlanner(model)


# --- rollouts ------------------------------------------------------------------

@dataclass
class Rollout:
    actions: list = field(default_factory=list)  # executed (commanded) actions
    states: list = field(default_factory=list)  # environment state tokens, starting state first
    goal_plans: list = field(default_factory=list)  # proposed goal sequence at every replan
    action_plans: list = field(default_factory=list)
    state_plans: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    success: bool = False
    steps: int = 0
    replans: int = 0

    def to_dict(self) -> dict:
        return {k: (v if not isinstance(v, list) else [list(map(int, x)) if isinstance(x, (list, np.ndarray))
                                                        else (float(x) if isinstance(x, float) else x)
                                                        for x in v])
                for k, v in asdict(self).items()}


def _expert_from(ep: Episode, instruction: int):
    # expert_demo starts from a fresh episode; subgoals already met stay met because
    # the mission is trimmed to the remaining ones
    rest = Mission(ep.mission.subgoals[ep.progress:], ep.mission.strict)
    return expert_demo(ep.grid, ep.agent, rest, instruction)


def _oracle_hint(ep: Episode, instruction: int, H: int) -> np.ndarray:
    null = ep.grid.width * ep.grid.height
    try:
        goals = _expert_from(ep, instruction).goals[:H]
    except Unsolvable:
        goals = []
    return np.asarray(list(goals) + [null] * (H - len(goals)), dtype=np.int64)


def executable(actions) -> list[int]:
    """Planned actions without the trailing run of pad actions.

    A plan that ends early fills the rest of the horizon with the pad action;
    executing those would only burn environment steps, so the episode replans
    instead. A plan made only of pads is kept whole.
    """
    acts = list(map(int, actions))
    end = len(acts)
    while end > 0 and acts[end - 1] == PAD_ACTION:
        end -= 1
    return acts[:end] if end else acts


def rollouts(planner, tasks: Sequence[Task], cfg: PlanConfig, plan_rngs, env_rngs=None,
             stochastic: float = 0.0, oracle_goals: bool = False, track_energy: bool = False,
             energy_rngs=None) -> list[Rollout]:
    """Run all episodes in lockstep, batching the replans of every episode that needs one.

    multi_step executes ``cfg.k`` planned actions (or stops early on a blocked
    move) before replanning; single_step replans after every action. Episodes end
    on success, failure or after ``cfg.horizon`` environment steps.
    """
    n = len(tasks)
    H = cfg.horizon
    eps = [Episode(t.grid, t.agent, t.mission) for t in tasks]
    outs = [Rollout(states=[state_token(t.agent, t.grid.width)]) for t in tasks]
    buffers: list = [[] for _ in range(n)]
    since = [0] * n
    for i, ep in enumerate(eps):
        outs[i].success = ep.success
    while True:
        live = [i for i in range(n) if not eps[i].done and eps[i].steps < H]
        if not live:
            break
        need = [i for i in live if not buffers[i] or since[i] >= cfg.k]
        if need:
            hint = ([_oracle_hint(eps[i], tasks[i].instruction_id, planner.arch.horizon) for i in need]
                    if oracle_goals else None)
            obs = ObsBatch.from_episodes([eps[i] for i in need], [tasks[i].instruction_id for i in need], hint)
            acts, sts, goals = planner.plan(obs, cfg, [plan_rngs[i] for i in need])
            if track_energy and isinstance(planner, GenPlanner):
                en = plan_energy(planner.model, obs, acts, cfg, [energy_rngs[i] for i in need])
            for j, i in enumerate(need):
                buffers[i] = executable(acts[j])
                since[i] = 0
                outs[i].replans += 1
                outs[i].goal_plans.append(list(map(int, goals[j])))
                outs[i].action_plans.append(list(map(int, acts[j])))
                outs[i].state_plans.append(list(map(int, sts[j])))
                if track_energy and isinstance(planner, GenPlanner):
                    outs[i].energies.append(float(en[j]))
        for i in live:
            a = buffers[i].pop(0)
            r = eps[i].step(a, stochastic, None if env_rngs is None else env_rngs[i])
            since[i] += 1
            outs[i].actions.append(a)
            outs[i].states.append(state_token(eps[i].agent, eps[i].grid.width))
            if r.info.blocked and cfg.replan_mode == "multi_step":
                since[i] = cfg.k
    for i, ep in enumerate(eps):
        outs[i].success = ep.success
        outs[i].steps = ep.steps
    return outs


def plan_energy(model, obs: ObsBatch, actions: np.ndarray, cfg: PlanConfig, rngs) -> np.ndarray:
    """Energy of each row's action plan under ``model`` (states and goals left as noise)."""
    B, H = actions.shape
    data = TrajectorySet(obs.grid, obs.agent, obs.instruction, np.zeros((B, H), dtype=np.int64),
                         np.asarray(actions, dtype=np.int64), np.zeros((B, H), dtype=np.int64), obs.context)
    return np.array([energy(model, data.subset([j]), cfg.interpolant, rngs[j])[0] for j in range(B)])


def rollout(model, task: Task, cfg: PlanConfig, rng: np.random.Generator, stochastic: float = 0.0,
            env_rng: Optional[np.random.Generator] = None, oracle_goals: bool = False) -> Rollout:
    return rollouts(as_planner(model), [task], cfg, [rng], None if env_rng is None else [env_rng],
                    stochastic, oracle_goals)[0]


# --- evaluation ------------------------------------------------------------------

@dataclass
class EvalReport:
    family: str
    n_episodes: int
    success_rate: float
    mean_steps: float
    episodes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def summary_row(self) -> str:
        return (f"{self.family:<32} n={self.n_episodes:<5d} success_rate={self.success_rate:.3f} "
                f"mean_steps={self.mean_steps:.2f}")

    def to_dict(self) -> dict:
        return asdict(self)


def episode_streams(master_seed: int, n: int):
    """Per-episode (task, plan, env, energy) generators from one master seed."""
    out = []
    for child in np.random.SeedSequence(master_seed).spawn(n):
        task_ss, plan_ss, env_ss, en_ss = child.spawn(4)
        out.append(tuple(np.random.default_rng(s) for s in (task_ss, plan_ss, env_ss, en_ss)))
    return out


def eval_tasks(family: TaskFamily, n: int, master_seed: int, exclude: Optional[set] = None) -> list[Task]:
    tasks = []
    for task_rng, *_ in episode_streams(master_seed, n):
        while True:
            t = generate_task(family, task_rng)
            if exclude is None or instance_key(t) not in exclude:
                break
        tasks.append(t)
    return tasks


def evaluate(model, family: TaskFamily, n_episodes: int, cfg: PlanConfig, master_seed: int,
             stochastic: float = 0.0, oracle_goals: bool = False, exclude: Optional[set] = None,
             track_energy: bool = False, tasks: Optional[list] = None) -> EvalReport:
    """Fresh instances per episode; all per-episode randomness derives from ``master_seed``.

    The same seed gives the same instances and plan/env noise for any model, so
    comparisons between planners are paired.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    streams = episode_streams(master_seed, n_episodes)
    if tasks is None:
        tasks = eval_tasks(family, n_episodes, master_seed, exclude)
    planner = as_planner(model)
    outs = rollouts(planner, tasks, cfg, [s[1] for s in streams], [s[2] for s in streams], stochastic,
                    oracle_goals, track_energy, [s[3] for s in streams])
    succ = sum(o.success for o in outs)
    episodes = []
    for i, (t, o) in enumerate(zip(tasks, outs)):
        rec = o.to_dict()
        rec["episode"] = i
        rec["instruction_id"] = t.instruction_id
        episodes.append(rec)
    return EvalReport(family.name, n_episodes, succ / n_episodes, float(np.mean([o.steps for o in outs])),
                      episodes, {"plan": asdict(cfg), "stochastic": stochastic, "oracle_goals": oracle_goals,
                                 "planner": "bc" if isinstance(planner, BCPlanner) else "genplan"})


def random_walk_success(family: TaskFamily, n_episodes: int, master_seed: int, horizon: int) -> float:
    """Monte-Carlo success rate of a uniformly random policy on the same instances."""
    tasks = eval_tasks(family, n_episodes, master_seed)
    rng = np.random.default_rng(master_seed + 1)
    succ = 0
    for t in tasks:
        ep = Episode(t.grid, t.agent, t.mission)
        while not ep.done and ep.steps < horizon:
            ep.step(int(rng.integers(6)))
        succ += ep.success
    return succ / n_episodes


def entropy_sweep(data: TrajectorySet, family: TaskFamily, betas: Sequence[float], train_cfg: TrainConfig,
                  arch: ArchConfig, plan_cfg: PlanConfig, n_episodes: int, master_seed: int,
                  exclude: Optional[set] = None) -> dict:
    """Train one model per β and evaluate each on the same episodes."""
    table = {}
    for b in betas:
        if not 0 <= b < math.log(arch.n_actions):
            raise ValueError(f"beta {b} outside [0, ln|A|)")
        cfg = TrainConfig(**{**asdict(train_cfg), "beta": b})
        res = fit(data, cfg, arch)
        table[b] = evaluate(res.model, family, n_episodes, plan_cfg, master_seed, exclude=exclude).success_rate
    return table
