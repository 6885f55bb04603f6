"""Denoiser training: corruption, masked NLL, entropy constraint with dual ascent, energy."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import dfm
from .dfm import DiscreteSpace, InterpolantKind
from .gridworld.encode import N_CHANNELS, encode_grid
from .gridworld.env import Action, state_token
from .gridworld.expert import Demonstration
from .net import ArchConfig, Denoiser, DenoiserInput, DenoiserOutput, ParamStore, loss_grads, optimizer_step
from .net.params import NonFiniteGradient

STREAMS = ("states", "actions", "goals")
PAD_ACTION = int(Action.DROP)


@dataclass
class TrainConfig:
    beta: float = 0.5
    lambda0: float = 0.0
    lr: float = 1e-3
    max_iters: int = 5000
    batch_size: int = 64
    interpolant: str = "mask"
    dual_lr: float = 0.01
    seed: int = 0
    clip_norm: Optional[float] = 1.0
    probe_every: int = 50
    n_probe: int = 64
    warmup: int = 100

    def __post_init__(self):
        if self.beta < 0 or self.lambda0 < 0:
            raise ValueError("beta and lambda0 must be non-negative")
        if self.max_iters < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("max_iters >= 0, batch_size >= 1 and lr > 0 are required")
        InterpolantKind(self.interpolant)

    @property
    def kind(self) -> InterpolantKind:
        return InterpolantKind(self.interpolant)


@dataclass
class LossBreakdown:
    l_action: float
    l_state: float
    l_goal: float
    l_entropy: float
    lambda_value: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


# --- data ---------------------------------------------------------------------

@dataclass
class TrajectorySet:
    """Fixed-horizon training examples: observation arrays plus clean token streams."""

    grid: np.ndarray  # (N, W, H, C) float32
    agent: np.ndarray  # (N,)
    instruction: np.ndarray  # (N,)
    states: np.ndarray  # (N, H)
    actions: np.ndarray
    goals: np.ndarray
    context: Optional[np.ndarray] = None  # (N, ctx, 2)
    steps: Optional[np.ndarray] = None  # (N,) real steps per row; later positions are padding

    def __len__(self) -> int:
        return len(self.states)

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    def decisions(self) -> np.ndarray:
        """(N, H) bool: positions holding a real action rather than end-of-trajectory padding."""
        if self.steps is None:
            return np.ones(self.actions.shape, dtype=bool)
        return np.arange(self.horizon)[None, :] < self.steps[:, None]

    def subset(self, idx) -> "TrajectorySet":
        return TrajectorySet(**{k: (None if v is None else v[idx]) for k, v in self.__dict__.items()})


def pad_streams(states: Sequence[int], actions: Sequence[int], goals: Sequence[int], final_state: int,
                null_goal: int, horizon: int) -> tuple[list, list, list]:
    """Pad to ``horizon``: the final state repeats, actions become drop, goals become null."""
    n = len(actions)
    if n > horizon:
        raise ValueError(f"trajectory of length {n} exceeds horizon {horizon}")
    pad = horizon - n
    return (list(states) + [final_state] * pad, list(actions) + [PAD_ACTION] * pad,
            list(goals) + [null_goal] * pad)


def examples_from_demos(demos: Sequence[Demonstration], horizon: int, suffixes: bool = True,
                        ctx: int = 0) -> TrajectorySet:
    """Every suffix of every demonstration becomes one example (observation = state at its start).

    A suffix longer than ``horizon`` is cut to its first ``horizon`` steps; only
    suffixes that reach the end of the demonstration are padded.
    """
    if not demos:
        raise ValueError("empty dataset")
    rows = {k: [] for k in ("grid", "agent", "instruction", "states", "actions", "goals", "context", "steps")}
    for d in demos:
        w, h = d.grid.width, d.grid.height
        replay = list(d.replay())
        final = state_token(replay[-1][1], w)
        starts = range(len(d)) if suffixes else [0]
        for k in starts:
            g, a, _ = replay[k]
            e = k + horizon
            s, act, gl = pad_streams(d.states[k:e], d.actions[k:e], d.goals[k:e], final, w * h, horizon)
            rows["grid"].append(encode_grid(g, a))
            rows["agent"].append(state_token(a, w))
            rows["instruction"].append(d.instruction_id)
            rows["states"].append(s)
            rows["actions"].append(act)
            rows["goals"].append(gl)
            rows["steps"].append(min(len(d) - k, horizon))
            if ctx:
                past = list(zip(d.states[max(0, k - ctx):k], d.actions[max(0, k - ctx):k]))
                fill = [(w * h * 4, 6)] * (ctx - len(past))  # mask ids
                rows["context"].append(fill + past)
    return TrajectorySet(
        np.stack(rows["grid"]).astype(np.float32),
        np.asarray(rows["agent"], dtype=np.int64),
        np.asarray(rows["instruction"], dtype=np.int64),
        np.asarray(rows["states"], dtype=np.int64),
        np.asarray(rows["actions"], dtype=np.int64),
        np.asarray(rows["goals"], dtype=np.int64),
        np.asarray(rows["context"], dtype=np.int64) if ctx else None,
        np.asarray(rows["steps"], dtype=np.int64),
    )


def spaces(arch: ArchConfig, kind) -> dict:
    return {k: DiscreteSpace.for_kind(v, kind) for k, v in arch.vocab_sizes.items()}


def corrupt_batch(data: TrajectorySet, arch: ArchConfig, kind, t: np.ndarray, rng: np.random.Generator,
                  streams: Sequence[str] = STREAMS) -> tuple[DenoiserInput, dict]:
    """Corrupt the selected streams at per-example time ``t`` (one t shared by all streams).

    Streams not listed are replaced by pure noise. Returns the denoiser input and
    per-stream boolean indicators of corrupted positions.
    """
    kind = InterpolantKind(kind)
    sp = spaces(arch, kind)
    noisy, ind = {}, {}
    for k in STREAMS:
        x1 = getattr(data, k)
        if k in streams:
            xt = dfm.corrupt(kind, sp[k], x1, t, rng)
        else:
            xt = dfm.noise_sample(kind, sp[k], x1.shape, rng)
        noisy[k] = xt
        ind[k] = sp[k].is_mask(xt) if kind is InterpolantKind.MASK else xt != x1
    inp = DenoiserInput(
        torch.from_numpy(noisy["states"]), torch.from_numpy(noisy["actions"]), torch.from_numpy(noisy["goals"]),
        torch.from_numpy(data.grid), torch.from_numpy(data.agent), torch.from_numpy(data.instruction),
        torch.as_tensor(t, dtype=torch.float32),
        None if data.context is None else torch.from_numpy(data.context),
    )
    return inp, {k: torch.from_numpy(np.asarray(v)) for k, v in ind.items()}


# --- losses -------------------------------------------------------------------

def masked_nll(out: DenoiserOutput, clean: dict, corrupted: dict) -> dict:
    """Per-stream NLL of the clean tokens averaged over corrupted positions (0 if none)."""
    losses = {}
    for k, logits in out.streams().items():
        ind = corrupted[k].to(logits.dtype)
        nll = F.cross_entropy(logits.transpose(1, 2), torch.as_tensor(clean[k]), reduction="none")
        n = ind.sum()
        losses[k] = (nll * ind).sum() / n if n > 0 else (logits * 0).sum()
    return losses


def entropy_term(action_logits: torch.Tensor, where: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean Shannon entropy (nats) of the action distributions.

    Averaged over all positions, or over ``where`` when given and non-empty.
    """
    logp = F.log_softmax(action_logits, dim=-1)
    ent = -(logp.exp() * logp).sum(-1)
    if where is not None and bool(where.any()):
        w = where.to(ent.dtype)
        return (ent * w).sum() / w.sum()
    return ent.mean()


def dual_update(lam: float, l_ent: float, beta: float, dual_lr: float) -> float:
    return max(0.0, lam - dual_lr * (l_ent - beta))


def _batch_times(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random(n)


def train_step(model: Denoiser, store: ParamStore, batch: TrajectorySet, cfg: TrainConfig, lam: float,
               rng: np.random.Generator, lr: Optional[float] = None) -> tuple[float, LossBreakdown]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    arch = model.arch
    t = _batch_times(len(batch), rng)
    inp, ind = corrupt_batch(batch, arch, cfg.kind, t, rng)
    out = model(inp)
    clean = {k: torch.from_numpy(getattr(batch, k)) for k in STREAMS}
    nll = masked_nll(out, clean, ind)
    # padding after the trajectory ends is not a decision; entropy there would be free
    l_ent = entropy_term(out.actions, ind["actions"] & torch.from_numpy(batch.decisions()))
    total = nll["actions"] + nll["states"] + nll["goals"] - lam * l_ent
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite loss at step {store.step}: "
                                 + ", ".join(f"{k}={float(v):.4g}" for k, v in nll.items()))
    grads = loss_grads(store, total)
    optimizer_step(store, grads, cfg.lr if lr is None else lr, clip_norm=cfg.clip_norm)
    ent = float(l_ent.detach())
    la, ls, lg = (float(nll[k].detach()) for k in ("actions", "states", "goals"))
    br = LossBreakdown(la, ls, lg, ent, lam, la + ls + lg - lam * ent)
    return dual_update(lam, ent, cfg.beta, cfg.dual_lr), br


# --- probes -------------------------------------------------------------------

@torch.no_grad()
def recovery_rate(model: Denoiser, probe: tuple[DenoiserInput, dict, dict]) -> float:
    """Fraction of corrupted positions (all streams) whose argmax equals the clean token."""
    inp, ind, clean = probe
    out = model(inp)
    hit = n = 0
    for k, logits in out.streams().items():
        m = ind[k]
        hit += int(((logits.argmax(-1) == clean[k]) & m).sum())
        n += int(m.sum())
    return hit / max(n, 1)


def make_probe(data: TrajectorySet, arch: ArchConfig, kind, n: int, seed: int):
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(data), size=min(n, len(data)), replace=False)
    sub = data.subset(np.sort(idx))
    t = (np.arange(len(sub)) + 0.5) / len(sub)  # stratified over (0, 1)
    inp, ind = corrupt_batch(sub, arch, kind, t, rng)
    clean = {k: torch.from_numpy(getattr(sub, k)) for k in STREAMS}
    return inp, ind, clean


@torch.no_grad()
def energy(model: Denoiser, data: TrajectorySet, kind, rng: np.random.Generator, t_probe: float = 0.5,
           n_probe: int = 8, condition_on: Sequence[str] = ()) -> np.ndarray:
    """Per-example energy of the clean action streams in ``data``.

    Each draw corrupts the actions (and any streams listed in ``condition_on``;
    the rest are pure noise) at ``t_probe``, sums the NLL of the clean actions over
    the corrupted positions and rescales by ``H / n_corrupted``. Draws without a
    corrupted action are redrawn. The result is the mean over ``n_probe`` draws.
    """
    H = data.horizon
    N = len(data)
    total = np.zeros(N)
    streams = ("actions",) + tuple(condition_on)
    clean = torch.from_numpy(data.actions)
    for _ in range(n_probe):
        todo = np.arange(N)
        vals = np.zeros(N)
        while len(todo):
            sub = data.subset(todo)
            inp, ind = corrupt_batch(sub, model.arch, kind, np.full(len(todo), t_probe), rng, streams)
            logp = F.log_softmax(model(inp).actions.double(), -1)
            nll = -logp.gather(-1, clean[todo][..., None])[..., 0]
            m = ind["actions"]
            cnt = m.sum(1).numpy()
            s = (nll * m).sum(1).numpy()
            ok = cnt > 0
            vals[todo[ok]] = s[ok] * H / cnt[ok]
            todo = todo[~ok]
        total += vals
    return total / n_probe


# --- fit ----------------------------------------------------------------------

@dataclass
class FitResult:
    model: Denoiser
    store: ParamStore
    lam: float
    log: list = field(default_factory=list)


def build_model(arch: ArchConfig, seed: int) -> Denoiser:
    torch.manual_seed(seed)
    return Denoiser(arch)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup then cosine decay to 10% over ``max_iters``."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = min(1.0, step / max(cfg.max_iters, 1))
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))


def fit(data: TrajectorySet, cfg: TrainConfig, arch: ArchConfig, log_path=None,
        resume: Optional[FitResult] = None, extra_iters: Optional[int] = None, verbose: bool = False) -> FitResult:
    """Run ``cfg.max_iters`` train steps over shuffled minibatches.

    ``resume`` continues an earlier result (step counter, λ and moments carry over).
    The probe recovery rate is refreshed every ``cfg.probe_every`` steps and is
    logged on every record.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.horizon != arch.horizon:
        raise ValueError(f"data horizon {data.horizon} differs from architecture horizon {arch.horizon}")
    if resume is None:
        model = build_model(arch, cfg.seed)
        store = ParamStore(model)
        lam = cfg.lambda0
    else:
        model, store, lam = resume.model, resume.store, resume.lam
    result = FitResult(model, store, lam)
    start = store.step
    n_iters = cfg.max_iters if extra_iters is None else extra_iters
    end = start + n_iters
    # the data stream depends only on (seed, step) so resumed runs see fresh batches
    rng = np.random.default_rng([cfg.seed, start])
    probe = make_probe(data, arch, cfg.kind, cfg.n_probe, cfg.seed + 7919)
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    t0 = time.time()
    rec = recovery_rate(model, probe)
    order = rng.permutation(len(data))
    pos = 0
    try:
        for step in range(start, end):
            if pos + cfg.batch_size > len(order):
                order, pos = rng.permutation(len(data)), 0
            idx = order[pos:pos + cfg.batch_size]
            pos += cfg.batch_size
            batch = data.subset(np.sort(idx))
            model.train()
            lam, br = train_step(model, store, batch, cfg, lam, rng, lr=lr_at(cfg, step))
            if cfg.probe_every and (step + 1) % cfg.probe_every == 0:
                rec = recovery_rate(model, probe)
            row = {"step": step + 1, **br.to_dict(), "lambda": br.lambda_value, "recovery": rec,
                   "wall_time": round(time.time() - t0, 3)}
            del row["lambda_value"]
            result.log.append(row)
            if fh:
                fh.write(json.dumps(row) + "\n")
            if verbose and (step + 1) % 500 == 0:
                print(f"step {step + 1}: la={br.l_action:.3f} ls={br.l_state:.3f} lg={br.l_goal:.3f} "
                      f"ent={br.l_entropy:.3f} lam={br.lambda_value:.3f} rec={rec:.3f}", flush=True)
    finally:
        if fh:
            fh.close()
    result.lam = lam
    model.eval()
    return result


LOG_FIELDS = ("step", "l_action", "l_state", "l_goal", "l_entropy", "lambda", "total", "recovery", "wall_time")


# --- toy data -----------------------------------------------------------------

def toy_arch(horizon: int = 4, **kw) -> ArchConfig:
    base = dict(width=3, height=3, channels=N_CHANNELS, horizon=horizon, d_model=32, n_layers=2, n_heads=4,
                obs_encoder="flat")
    base.update(kw)
    return ArchConfig(**base)


def toy_dataset(sequences: Sequence[Sequence[int]], arch: ArchConfig, instructions=None,
                repeats: int = 1) -> TrajectorySet:
    """Action-only toy set on a blank observation; states/goals are fixed tokens.

    ``instructions`` optionally gives one instruction id per sequence.
    """
    seqs = np.asarray(sequences, dtype=np.int64)
    n, H = seqs.shape
    if H != arch.horizon:
        raise ValueError("sequence length must equal the horizon")
    instr = np.zeros(n, dtype=np.int64) if instructions is None else np.asarray(instructions, dtype=np.int64)
    seqs = np.tile(seqs, (repeats, 1))
    instr = np.tile(instr, repeats)
    N = len(seqs)
    return TrajectorySet(
        np.zeros((N, arch.width, arch.height, arch.channels), dtype=np.float32),
        np.zeros(N, dtype=np.int64), instr,
        np.zeros((N, H), dtype=np.int64), seqs,
        np.full((N, H), arch.n_goals - 1, dtype=np.int64),
    )
