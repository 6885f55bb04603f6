"""Central finite-difference checks of autograd, in float64."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .net import ArchConfig, Denoiser, DenoiserInput, ParamStore, loss_grads, modulate
from .train import entropy_term, masked_nll


def rel_err(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def fd_check(fn, inputs, n_coords: int = 12, h: float = 1e-3, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences on random coordinates.

    The output is contracted with a fixed random tensor so every output entry
    contributes to the checked scalar.
    """
    rng = np.random.default_rng(seed)
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    w = torch.randn(out.shape, dtype=out.dtype, generator=torch.Generator().manual_seed(seed + 9173))
    grads = torch.autograd.grad((out * w).sum(), inputs)
    worst = 0.0
    for x, gx in zip(inputs, grads):
        flat = x.detach().view(-1)
        for idx in rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False):
            old = flat[idx].item()
            with torch.no_grad():
                flat[idx] = old + h
                up = float((fn(*inputs) * w).sum())
                flat[idx] = old - h
                dn = float((fn(*inputs) * w).sum())
                flat[idx] = old
            worst = max(worst, rel_err(gx.view(-1)[idx].item(), (up - dn) / (2 * h)))
    return worst


def randn(*shape, seed: int = 0) -> torch.Tensor:
    return torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def _attention(q, k, v):
    return ((q @ k.transpose(-1, -2)) / 2.0).softmax(-1) @ v


def primitive_cases() -> dict:
    """Every differentiable building block the denoiser is assembled from."""
    idx = torch.tensor([[0, 3, 3], [1, 4, 0]])
    tgt = torch.tensor([0, 2, 5, 1])
    return {
        "matmul": (lambda a, b: a @ b, [randn(3, 4), randn(4, 5, seed=1)]),
        "softmax": (lambda a: a.softmax(-1), [randn(4, 6)]),
        "log_softmax": (lambda a: a.log_softmax(-1), [randn(4, 6)]),
        "layernorm": (lambda a: F.layer_norm(a, (6,)), [randn(4, 6)]),
        "gelu": (F.gelu, [randn(5, 3)]),
        "silu": (F.silu, [randn(5, 3)]),
        "embedding": (lambda w: F.embedding(idx, w), [randn(5, 4)]),
        "modulate": (modulate, [randn(2, 3, 4), randn(2, 4, seed=1), randn(2, 4, seed=2)]),
        "cross_entropy": (lambda a: F.cross_entropy(a, tgt, reduction="none"), [randn(4, 6)]),
        "conv2d": (lambda x, w: F.conv2d(x, w, padding=1), [randn(1, 2, 4, 3), randn(3, 2, 3, 3, seed=1)]),
        "attention": (_attention, [randn(3, 4), randn(3, 4, seed=1), randn(3, 4, seed=2)]),
        "entropy": (lambda a: entropy_term(a.view(1, 4, 6)).view(1), [randn(4, 6)]),
    }


def check_primitives() -> dict:
    return {name: fd_check(fn, xs) for name, (fn, xs) in primitive_cases().items()}


def random_input(arch: ArchConfig, B: int = 2, seed: int = 0, masked: float = 0.5) -> DenoiserInput:
    g = torch.Generator().manual_seed(seed)
    H = arch.horizon

    def stream(v):
        x = torch.randint(0, v, (B, H), generator=g)
        m = torch.rand(B, H, generator=g) < masked
        return torch.where(m, torch.full_like(x, v), x)

    return DenoiserInput(
        stream(arch.n_states), stream(arch.n_actions), stream(arch.n_goals),
        torch.rand(B, arch.width, arch.height, arch.channels, generator=g, dtype=torch.float64),
        torch.randint(0, arch.n_states, (B,), generator=g),
        torch.randint(0, arch.n_instructions, (B,), generator=g),
        torch.rand(B, generator=g, dtype=torch.float64),
    )


def full_loss(model: Denoiser, inp: DenoiserInput, clean: dict, lam: float = 0.3) -> torch.Tensor:
    """Training objective on masked positions: NLL of all streams minus lam * action entropy."""
    out = model(inp)
    ind = {k: getattr(inp, k) == v for k, v in model.arch.vocab_sizes.items()}
    nll = masked_nll(out, clean, ind)
    return nll["states"] + nll["actions"] + nll["goals"] - lam * entropy_term(out.actions, ind["actions"])


def check_full_loss(arch: ArchConfig, per_param: int = 3, h: float = 1e-3, seed: int = 0) -> tuple[float, int]:
    """FD check of the full loss w.r.t. sampled coordinates of every parameter tensor.

    Returns ``(worst relative error, number of coordinates checked)``.
    """
    torch.manual_seed(seed)
    model = Denoiser(arch).double()
    # non-zero modulation so every parameter influences the loss
    with torch.no_grad():
        for blk in model.blocks:
            blk.film.weight.normal_(0, 0.05)
    store = ParamStore(model)
    inp = random_input(arch, masked=0.6, seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    clean = {k: torch.randint(0, v, (2, arch.horizon), generator=g) for k, v in arch.vocab_sizes.items()}
    grads = loss_grads(store, full_loss(model, inp, clean))
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    # the mask row of an embedding is pinned at zero and never trained
    frozen = {f"{n}.weight": m.padding_idx for n, m in model.named_modules()
              if isinstance(m, torch.nn.Embedding) and m.padding_idx is not None}
    for name, p in store.params.items():
        flat = p.data.view(-1)
        gflat = grads[name].view(-1)
        allowed = np.arange(flat.numel())
        if name in frozen:
            allowed = allowed[allowed // p.shape[1] != frozen[name]]
        for idx in rng.choice(allowed, size=min(per_param, allowed.size), replace=False):
            old = flat[idx].item()
            with torch.no_grad():
                flat[idx] = old + h
                up = float(full_loss(model, inp, clean))
                flat[idx] = old - h
                dn = float(full_loss(model, inp, clean))
                flat[idx] = old
            worst = max(worst, rel_err(gflat[idx].item(), (up - dn) / (2 * h)))
            checked += 1
    return worst, checked
