"""Joint denoiser over (states, actions, goals) and the causal BC trunk.

Token layout of the denoiser, all bidirectional:

    [obs] [grid cells...] [context...] [oracle goals...] s_1..s_H a_1..a_H g_1..g_H

Every block is modulated by a per-block scale/shift computed from the observation
summary plus a sinusoidal embedding of t.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

# learned position/type tables; masked tokens carry nothing else, so they must not be tiny
POS_STD = 0.5


@dataclass(frozen=True)
class ArchConfig:
    width: int = 7  # grid width/height
    height: int = 7
    channels: int = 21
    horizon: int = 20
    n_actions: int = 6
    n_instructions: int = 78
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    t_dim: int = 16
    ctx: int = 0
    # "cells": one token per grid cell (linear in its channels); "conv": cell tokens from a
    # two-layer 3x3 conv stem so each token sees its neighbourhood; "flat": one MLP summary
    obs_encoder: str = "cells"
    causal: bool = False
    tied: bool = True  # with cell tokens: state/goal tokens reuse the cell position vectors

    @property
    def spatial(self) -> bool:
        return self.tied and self.obs_encoder != "flat"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.obs_encoder not in ("cells", "conv", "flat"):
            raise ValueError(f"unknown obs_encoder {self.obs_encoder!r}")
        if self.horizon < 1 or self.ctx < 0:
            raise ValueError("horizon must be positive and ctx non-negative")

    @property
    def n_states(self) -> int:
        return self.width * self.height * 4

    @property
    def n_goals(self) -> int:
        return self.width * self.height + 1  # last token = no active goal

    @property
    def vocab_sizes(self) -> dict:
        return {"states": self.n_states, "actions": self.n_actions, "goals": self.n_goals}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown architecture fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DenoiserInput:
    """Batched input. Sequence streams are ``(B, H)`` int64 and may contain the
    mask id (= vocabulary size of the stream)."""

    states: torch.Tensor
    actions: torch.Tensor
    goals: torch.Tensor
    grid: torch.Tensor  # (B, W, H, C) float
    agent: torch.Tensor  # (B,)
    instruction: torch.Tensor  # (B,)
    t: torch.Tensor  # (B,)
    context: Optional[torch.Tensor] = None  # (B, ctx, 2): past (state, action); padded with mask ids
    goal_hint: Optional[torch.Tensor] = None  # (B, H) oracle goal tokens

    @property
    def batch(self) -> int:
        return self.states.shape[0]

    def check(self, arch: ArchConfig) -> None:
        B = self.batch
        for name in ("states", "actions", "goals"):
            x = getattr(self, name)
            if tuple(x.shape) != (B, arch.horizon):
                raise ValueError(f"{name} has shape {tuple(x.shape)}, expected {(B, arch.horizon)}")
        if tuple(self.grid.shape) != (B, arch.width, arch.height, arch.channels):
            raise ValueError(f"grid has shape {tuple(self.grid.shape)}, expected "
                             f"{(B, arch.width, arch.height, arch.channels)}")
        if self.t.shape != (B,) or self.agent.shape != (B,) or self.instruction.shape != (B,):
            raise ValueError("t, agent and instruction must be (B,)")
        if self.context is not None and (self.context.shape[1] > arch.ctx or self.context.shape[0] != B):
            raise ValueError(f"context longer than configured ctx={arch.ctx}")

    def index(self, idx) -> "DenoiserInput":
        return DenoiserInput(**{k: (None if v is None else v[idx]) for k, v in self.__dict__.items()})


@dataclass
class DenoiserOutput:
    states: torch.Tensor  # (B, H, |S|) logits
    actions: torch.Tensor  # (B, H, |A|)
    goals: torch.Tensor  # (B, H, |G|)

    def streams(self) -> dict:
        return {"states": self.states, "actions": self.actions, "goals": self.goals}


def sinusoidal(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    ang = t[:, None] * freqs[None] * 2 * math.pi
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def modulate(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """Affine modulation ``x * (1 + scale) + shift`` with per-example scale/shift."""
    return x * (1 + scale[:, None]) + shift[:, None]


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, cond_dim: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d, elementwise_affine=False)
        self.ln2 = nn.LayerNorm(d, elementwise_affine=False)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))
        self.film = nn.Linear(cond_dim, 4 * d)
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)

    def forward(self, x, cond, attn_mask=None):
        B, L, D = x.shape
        s1, b1, s2, b2 = self.film(cond).chunk(4, dim=-1)
        h = modulate(self.ln1(x), s1, b1)
        q, k, v = self.qkv(h).view(B, L, 3, self.n_heads, D // self.n_heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(D // self.n_heads)
        if attn_mask is not None:
            att = att.masked_fill(~attn_mask, float("-inf"))
        y = (att.softmax(-1) @ v).transpose(1, 2).reshape(B, L, D)
        x = x + self.proj(y)
        return x + self.mlp(modulate(self.ln2(x), s2, b2))


class ObservationEncoder(nn.Module):
    """Grid tensor + agent token + instruction -> (summary vector, optional cell tokens)."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        d = arch.d_model
        self.arch = arch
        n_cells = arch.width * arch.height
        if arch.obs_encoder == "flat":
            self.grid = nn.Sequential(nn.Linear(n_cells * arch.channels, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        else:
            if arch.obs_encoder == "conv":
                self.cell = nn.Sequential(nn.Conv2d(arch.channels, d, 3, padding=1), nn.GELU(),
                                          nn.Conv2d(d, d, 3, padding=1))
            else:
                self.cell = nn.Linear(arch.channels, d)
            self.cell_pos = nn.Parameter(torch.randn(n_cells, d) * POS_STD)
        if arch.spatial:
            self.heading = nn.Parameter(torch.randn(4, d) * POS_STD)
            self.null_goal = nn.Parameter(torch.randn(d) * POS_STD)
        else:
            self.agent = nn.Embedding(arch.n_states, d)
        self.instruction = nn.Embedding(arch.n_instructions, d)

    def state_table(self) -> torch.Tensor:
        """(|S|, d) vectors of state tokens ``cell * 4 + heading``."""
        return (self.cell_pos[:, None] + self.heading[None]).reshape(-1, self.cell_pos.shape[1])

    def goal_table(self) -> torch.Tensor:
        return torch.cat([self.cell_pos, self.null_goal[None]], 0)

    def embed_agent(self, agent):
        return F.embedding(agent, self.state_table()) if self.arch.spatial else self.agent(agent)

    def forward(self, grid, agent, instruction):
        B = grid.shape[0]
        summary = self.embed_agent(agent) + self.instruction(instruction)
        if self.arch.obs_encoder == "flat":
            return summary + self.grid(grid.reshape(B, -1)), None
        # (B, W, H, C) -> row-major cells (y * W + x)
        if self.arch.obs_encoder == "conv":
            feat = self.cell(grid.permute(0, 3, 2, 1))  # (B, d, H, W)
            cells = feat.flatten(2).transpose(1, 2) + self.cell_pos
        else:
            cells = self.cell(grid.permute(0, 2, 1, 3).reshape(B, -1, grid.shape[-1])) + self.cell_pos
        return summary, cells


class Denoiser(nn.Module):
    """p_theta(clean streams | corrupted streams, observation, t)."""

    STREAMS = ("states", "actions", "goals")

    def __init__(self, arch: ArchConfig):
        super().__init__()
        if arch.causal:
            raise ValueError("the denoiser is bidirectional; use BCModel for causal decoding")
        self.arch = arch
        d, H = arch.d_model, arch.horizon
        self.obs = ObservationEncoder(arch)
        self.t_proj = nn.Sequential(nn.Linear(arch.t_dim, d), nn.GELU(), nn.Linear(d, d))
        vs = arch.vocab_sizes
        self.tabled = ("states", "goals") if arch.spatial else ()
        # the extra row is the mask symbol; padding_idx pins its embedding at zero
        self.embed = nn.ModuleDict({k: nn.Embedding(v + 1, d, padding_idx=v)
                                    for k, v in vs.items() if k not in self.tabled})
        self.pos = nn.Parameter(torch.randn(H, d) * POS_STD)
        self.stream = nn.Parameter(torch.randn(3, d) * POS_STD)
        self.obs_type = nn.Parameter(torch.randn(d) * POS_STD)
        if arch.ctx:
            if not arch.spatial:
                self.ctx_state = nn.Embedding(vs["states"] + 1, d, padding_idx=vs["states"])
            self.ctx_action = nn.Embedding(vs["actions"] + 1, d, padding_idx=vs["actions"])
            self.ctx_pos = nn.Parameter(torch.randn(arch.ctx, d) * POS_STD)
        if not arch.spatial:
            self.hint = nn.Embedding(vs["goals"] + 1, d, padding_idx=vs["goals"])
        self.hint_type = nn.Parameter(torch.randn(d) * POS_STD)
        self.blocks = nn.ModuleList([Block(d, arch.n_heads, d) for _ in range(arch.n_layers)])
        self.ln_f = nn.LayerNorm(d)
        # tabled streams score against their embedding table (weight tying)
        self.heads = nn.ModuleDict({k: nn.Linear(d, d if k in self.tabled else v) for k, v in vs.items()})
        self.head_bias = nn.ParameterDict({k: nn.Parameter(torch.zeros(vs[k])) for k in self.tabled})

    def _tables(self) -> dict:
        return {"states": self.obs.state_table(), "goals": self.obs.goal_table()} if self.tabled else {}

    def _embed(self, k: str, x: torch.Tensor, tables: dict) -> torch.Tensor:
        if k in tables:
            tab = tables[k]
            return F.embedding(x, torch.cat([tab, tab.new_zeros(1, tab.shape[1])], 0))
        return self.embed[k](x)

    def _head(self, k: str, h: torch.Tensor, tables: dict) -> torch.Tensor:
        if k in tables:
            return self.heads[k](h) @ tables[k].T + self.head_bias[k]
        return self.heads[k](h)

    def forward(self, inp: DenoiserInput) -> DenoiserOutput:
        arch = self.arch
        inp.check(arch)
        B, H = inp.batch, arch.horizon
        summary, cells = self.obs(inp.grid, inp.agent, inp.instruction)
        cond = summary + self.t_proj(sinusoidal(inp.t.to(summary.dtype), arch.t_dim))
        prefix = [(cond + self.obs_type)[:, None]]
        if cells is not None:
            prefix.append(cells)
        tables = self._tables()
        if inp.context is not None and arch.ctx:
            c = inp.context
            n = c.shape[1]
            cs = self._embed("states", c[..., 0], tables) if tables else self.ctx_state(c[..., 0])
            prefix.append(cs + self.ctx_action(c[..., 1]) + self.ctx_pos[:n])
        if inp.goal_hint is not None:
            hint = self._embed("goals", inp.goal_hint, tables) if tables else self.hint(inp.goal_hint)
            prefix.append(hint + self.pos + self.hint_type)
        seq = [self._embed(k, getattr(inp, k), tables) + self.pos + self.stream[i]
               for i, k in enumerate(self.STREAMS)]
        x = torch.cat(prefix + seq, dim=1)
        for blk in self.blocks:
            x = blk(x, cond)
        x = self.ln_f(x[:, -3 * H:])
        return DenoiserOutput(*(self._head(k, x[:, i * H:(i + 1) * H], tables) for i, k in enumerate(self.STREAMS)))


class BCModel(nn.Module):
    """Causal next-token baseline over ``[obs] s_1 a_1 s_2 a_2 ... s_H a_H``.

    The output at ``s_k`` predicts ``a_k``; the output at ``a_k`` predicts ``s_{k+1}``.
    Shares the observation encoder and block design with :class:`Denoiser`.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        d, H = arch.d_model, arch.horizon
        self.obs = ObservationEncoder(arch)
        if not arch.spatial:
            self.s_embed = nn.Embedding(arch.n_states, d)
        self.a_embed = nn.Embedding(arch.n_actions, d)
        self.pos = nn.Parameter(torch.randn(2 * H, d) * POS_STD)
        self.obs_type = nn.Parameter(torch.randn(d) * POS_STD)
        self.blocks = nn.ModuleList([Block(d, arch.n_heads, d) for _ in range(arch.n_layers)])
        self.ln_f = nn.LayerNorm(d)
        self.action_head = nn.Linear(d, arch.n_actions)
        if arch.spatial:
            self.state_head = nn.Linear(d, d)
            self.state_bias = nn.Parameter(torch.zeros(arch.n_states))
        else:
            self.state_head = nn.Linear(d, arch.n_states)

    def forward(self, grid, agent, instruction, states, actions):
        """``states``/``actions`` are ``(B, n)`` prefixes with ``actions`` possibly one shorter.

        Returns ``(action_logits (B, n_s, |A|), state_logits (B, n_a, |S|))``.
        """
        B = grid.shape[0]
        n_s, n_a = states.shape[1], actions.shape[1]
        if not n_a <= n_s <= n_a + 1 or n_s > self.arch.horizon:
            raise ValueError("bad prefix lengths")
        summary, cells = self.obs(grid, agent, instruction)
        d = summary.shape[-1]
        toks = torch.zeros(B, n_s + n_a, d, dtype=summary.dtype)
        table = self.obs.state_table() if self.arch.spatial else None
        toks[:, 0::2] = F.embedding(states, table) if table is not None else self.s_embed(states)
        if n_a:
            toks[:, 1::2] = self.a_embed(actions)
        toks = toks + self.pos[: n_s + n_a]
        prefix = [(summary + self.obs_type)[:, None]]
        if cells is not None:
            prefix.append(cells)
        P = sum(p.shape[1] for p in prefix)
        x = torch.cat(prefix + [toks], dim=1)
        L = x.shape[1]
        mask = torch.ones(L, L, dtype=torch.bool).tril()
        mask[:, :P] = True  # observation tokens are always visible
        for blk in self.blocks:
            x = blk(x, summary, mask)
        x = self.ln_f(x[:, P:])
        s_out = self.state_head(x[:, 1::2])
        if table is not None:
            s_out = s_out @ table.T + self.state_bias
        return self.action_head(x[:, 0::2]), s_out
