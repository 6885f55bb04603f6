"""Parameter store, reverse-mode gradients, Adam and the checkpoint format.

Checkpoint layout (all integers little-endian):

    b"GPCK"            4-byte magic
    u32 version        currently 1
    u32 n              length of the JSON header in bytes
    n bytes            UTF-8 JSON header; ``header["arrays"]`` lists [name, shape] in file order
    arrays             each array as float64 little-endian, row-major, in header order

Besides ``arrays`` the header carries the architecture, alphabet sizes, training
step and whatever the caller adds (λ, interpolant, model type).
"""
from __future__ import annotations

import json
import math
import struct
from typing import Optional

import numpy as np
import torch

MAGIC = b"GPCK"
CKPT_VERSION = 1


class MissingTape(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Named parameters of a module plus Adam moments and a step counter."""

    def __init__(self, module: torch.nn.Module):
        self.module = module
        self.params = dict(module.named_parameters())
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.step = 0

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self) -> dict:
        return {k: torch.zeros_like(p) for k, p in self.params.items()}

    def state_arrays(self) -> dict:
        out = {}
        for k, p in self.params.items():
            out[k] = p.detach()
        for k in self.params:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        return out


def backward(store: ParamStore, outputs, upstream) -> dict:
    """Vector-Jacobian product of ``outputs`` w.r.t. every parameter.

    ``outputs``/``upstream`` are matching sequences of tensors (or a single
    tensor each). Raises :class:`MissingTape` when the outputs were produced
    without gradient recording.
    """
    if isinstance(outputs, torch.Tensor):
        outputs, upstream = [outputs], [upstream]
    outputs, upstream = list(outputs), list(upstream)
    if any(o.grad_fn is None for o in outputs):
        raise MissingTape("forward was evaluated without gradient taping")
    names = store.names()
    grads = torch.autograd.grad(outputs, [store.params[k] for k in names], upstream,
                                allow_unused=True, retain_graph=True)
    return {k: torch.zeros_like(store.params[k]) if g is None else g for k, g in zip(names, grads)}


def loss_grads(store: ParamStore, loss: torch.Tensor) -> dict:
    return backward(store, loss, torch.ones_like(loss))


def optimizer_step(store: ParamStore, grads: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                   clip_norm: Optional[float] = None) -> float:
    """Bias-corrected Adam update in place. Returns the (pre-clip) gradient norm.

    Non-finite gradients reject the whole step and leave the store untouched.
    """
    missing = set(store.params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for {sorted(missing)[:5]}")
    norm = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g.double()) for g in grads.values()])))
    if not math.isfinite(norm):
        bad = [k for k, g in grads.items() if not torch.isfinite(g).all()]
        raise NonFiniteGradient(f"non-finite gradient in {len(bad)} tensor(s), e.g. {bad[:3]}; step rejected")
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / (norm + 1e-12)
    b1, b2 = betas
    store.step += 1
    c1 = 1 - b1 ** store.step
    c2 = 1 - b2 ** store.step
    with torch.no_grad():
        keys = list(store.params)
        ps = [store.params[k] for k in keys]
        gs = [grads[k] * scale for k in keys]
        ms = [store.m[k] for k in keys]
        vs = [store.v[k] for k in keys]
        torch._foreach_mul_(ms, b1)
        torch._foreach_add_(ms, gs, alpha=1 - b1)
        torch._foreach_mul_(vs, b2)
        torch._foreach_addcmul_(vs, gs, gs, value=1 - b2)
        denom = torch._foreach_div(vs, c2)
        torch._foreach_sqrt_(denom)
        torch._foreach_add_(denom, eps)
        torch._foreach_addcdiv_(ps, ms, denom, value=-lr / c1)
    return norm


def save_checkpoint(path, store: ParamStore, header: dict) -> None:
    arrays = store.state_arrays()
    head = dict(header)
    head["step"] = store.step
    head["arrays"] = [[k, list(v.shape)] for k, v in arrays.items()]
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(v.detach().cpu().numpy().astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, {name: float64 ndarray})``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint")
    version, n = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported")
    try:
        header = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"bad checkpoint header: {e}") from None
    off = 12 + n
    arrays = {}
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) if shape else 1
        end = off + 8 * size
        if end > len(data):
            raise CheckpointError(f"truncated checkpoint at array {name!r}")
        arrays[name] = np.frombuffer(data[off:end], dtype="<f8").reshape(shape).copy()
        off = end
    if off != len(data):
        raise CheckpointError("trailing bytes after the last array")
    return header, arrays


def load_into(store: ParamStore, arrays: dict, header: dict) -> None:
    """Copy parameters and optimizer moments into ``store``; shapes must match."""
    want = store.state_arrays()
    if set(want) != set(arrays):
        extra, missing = set(arrays) - set(want), set(want) - set(arrays)
        raise CheckpointError(f"checkpoint/architecture mismatch: missing {sorted(missing)[:3]}, "
                              f"unexpected {sorted(extra)[:3]}")
    with torch.no_grad():
        for k, v in want.items():
            if tuple(v.shape) != arrays[k].shape:
                raise CheckpointError(f"shape mismatch for {k}: {arrays[k].shape} vs {tuple(v.shape)}")
            v.copy_(torch.from_numpy(arrays[k]).to(v.dtype))
    store.step = int(header.get("step", 0))
