"""Discrete flow matching on finite alphabets.

Conditional interpolants between noise (t=0) and data (t=1), the ReLU-rectified
conditional rate matrix, Euler simulation of the reverse CTMC and an exact
Bayes posterior that stands in for a learned denoiser in tests.

Shapes: a batch of sequences is an int array ``(N, H)``; a denoiser returns
probabilities over the *data* symbols, ``(N, H, |X|)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class InterpolantKind(str, enum.Enum):
    MASK = "mask"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class DiscreteSpace:
    """A finite alphabet ``{0, ..., cardinality-1}`` plus an optional mask slot.

    The mask symbol, when present, is always the index ``cardinality`` so that
    the effective vocabulary is ``cardinality + 1``.
    """

    cardinality: int
    mask_index: Optional[int] = None

    def __post_init__(self):
        if self.cardinality < 2:
            raise ValueError(f"cardinality must be >= 2, got {self.cardinality}")
        if self.mask_index is not None and self.mask_index != self.cardinality:
            raise ValueError("mask_index must equal cardinality")

    @classmethod
    def for_kind(cls, cardinality: int, kind: InterpolantKind) -> "DiscreteSpace":
        kind = InterpolantKind(kind)
        return cls(cardinality, cardinality if kind is InterpolantKind.MASK else None)

    @property
    def vocab_size(self) -> int:
        return self.cardinality + (self.mask_index is not None)

    def is_mask(self, x) -> np.ndarray:
        if self.mask_index is None:
            return np.zeros(np.shape(x), dtype=bool)
        return np.asarray(x) == self.mask_index


def _check_time(t: float, upper_open: bool = False) -> None:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if upper_open and t >= 1.0:
        raise ValueError("rates are singular at t = 1")


def _check_kind(kind, space: DiscreteSpace) -> InterpolantKind:
    kind = InterpolantKind(kind)
    if kind is InterpolantKind.MASK and space.mask_index is None:
        raise ValueError("mask interpolant needs a space with a mask slot")
    return kind


def interpolant_prob(kind, space: DiscreteSpace, x1: int, xt: int, t: float) -> float:
    """p_{t|1}(xt | x1) for one symbol pair."""
    kind = _check_kind(kind, space)
    _check_time(t)
    if not 0 <= x1 < space.cardinality:
        raise ValueError(f"x1={x1} is not a data symbol")
    if not 0 <= xt < space.vocab_size:
        raise ValueError(f"xt={xt} outside the vocabulary")
    same = float(x1 == xt)
    if kind is InterpolantKind.MASK:
        return t * same + (1.0 - t) * float(xt == space.mask_index)
    if xt == space.mask_index:
        return 0.0
    return t * same + (1.0 - t) / space.cardinality


def interpolant_probs(kind, space: DiscreteSpace, x1, t) -> np.ndarray:
    """Full conditional categorical ``p_{t|1}(. | x1)`` for an array of x1.

    ``t`` broadcasts against ``x1``; the result has a trailing vocab axis.
    """
    kind = _check_kind(kind, space)
    x1 = np.asarray(x1)
    t = np.broadcast_to(np.asarray(t, dtype=float), x1.shape)[..., None]
    onehot = np.eye(space.vocab_size)[x1]
    if kind is InterpolantKind.MASK:
        noise = np.zeros(space.vocab_size)
        noise[space.mask_index] = 1.0
    else:
        noise = np.zeros(space.vocab_size)
        noise[: space.cardinality] = 1.0 / space.cardinality
    return t * onehot + (1.0 - t) * noise


def corrupt(kind, space: DiscreteSpace, x1_seq, t, rng: np.random.Generator) -> np.ndarray:
    """Sample ``x^t ~ p_{t|1}(. | x^1)`` independently at every position.

    ``t`` is a scalar or one value per leading row of ``x1_seq``.
    """
    kind = _check_kind(kind, space)
    x1 = np.asarray(x1_seq, dtype=np.int64)
    if np.any(x1 < 0) or np.any(x1 >= space.cardinality):
        raise ValueError("clean sequences must contain data symbols only")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1 and x1.ndim == 2:
        t = t[:, None]
    keep = rng.random(x1.shape) < t
    if kind is InterpolantKind.MASK:
        noise = np.full(x1.shape, space.mask_index, dtype=np.int64)
    else:
        noise = rng.integers(0, space.cardinality, size=x1.shape)
    return np.where(keep, x1, noise)


def noise_sample(kind, space: DiscreteSpace, shape, rng: np.random.Generator) -> np.ndarray:
    """Draw from p_0: all-mask, or i.i.d. uniform over the data symbols."""
    kind = _check_kind(kind, space)
    if kind is InterpolantKind.MASK:
        return np.full(shape, space.mask_index, dtype=np.int64)
    return rng.integers(0, space.cardinality, size=shape)


def _support(kind: InterpolantKind, space: DiscreteSpace, x1: int) -> list[int]:
    # Support of p_{t|1}(. | x1) on the open interval 0 < t < 1.
    if kind is InterpolantKind.MASK:
        return [x1, space.mask_index]
    return list(range(space.cardinality))


def _dprob_dt(kind: InterpolantKind, space: DiscreteSpace, x1: int, x: int) -> float:
    if kind is InterpolantKind.MASK:
        if x == x1:
            return 1.0
        return -1.0 if x == space.mask_index else 0.0
    if x == space.mask_index:
        return 0.0
    return float(x == x1) - 1.0 / space.cardinality


def rate_star(kind, space: DiscreteSpace, xt: int, j: int, x1: int, t: float) -> float:
    """Conditional jump intensity R*_t(xt -> j | x1) for j != xt.

    ReLU(d/dt p(j|x1) - d/dt p(xt|x1)) / (Z_t p(xt|x1)) where Z_t counts the
    symbols carrying mass. Jumps towards symbols with no conditional mass are 0.
    """
    kind = _check_kind(kind, space)
    _check_time(t, upper_open=True)
    if j == xt:
        raise ValueError("rate_star is defined off the diagonal only")
    support = _support(kind, space, x1)
    if xt not in support:
        raise ValueError(f"xt={xt} is a dead state for x1={x1}")
    if j not in support:
        return 0.0
    num = max(_dprob_dt(kind, space, x1, j) - _dprob_dt(kind, space, x1, xt), 0.0)
    if num == 0.0:
        return 0.0
    return num / (len(support) * interpolant_prob(kind, space, x1, xt, t))


def rate_row(kind, space: DiscreteSpace, xt: int, x1: int, t: float) -> np.ndarray:
    """Row ``R*_t(xt, . | x1)`` over the vocabulary; diagonal makes it sum to 0."""
    row = np.zeros(space.vocab_size)
    for j in range(space.vocab_size):
        if j != xt:
            row[j] = rate_star(kind, space, xt, j, x1, t)
    row[xt] = -row.sum()
    return row


def rate_matrix(kind, space: DiscreteSpace, x1: int, t: float) -> np.ndarray:
    """Conditional generator for a fixed x1; rows of dead states are zero."""
    kind = _check_kind(kind, space)
    R = np.zeros((space.vocab_size, space.vocab_size))
    for xt in _support(kind, space, x1):
        R[xt] = rate_row(kind, space, xt, x1, t)
    return R


def expected_rates(kind, space: DiscreteSpace, probs: np.ndarray, xt: np.ndarray, t: float) -> np.ndarray:
    """Denoiser-averaged rates ``sum_x1 p(x1) R*_t(xt, j | x1)`` for j != xt.

    Both interpolants reduce to ``p(j) / (1 - t)`` towards data symbols j != xt;
    under masking only the mask state moves. Diagonal entries are left at 0.
    ``probs`` has shape ``xt.shape + (|X|,)``; the result has a vocab axis.
    """
    kind = _check_kind(kind, space)
    _check_time(t, upper_open=True)
    xt = np.asarray(xt)
    rates = np.zeros(xt.shape + (space.vocab_size,))
    rates[..., : space.cardinality] = probs / (1.0 - t)
    if kind is InterpolantKind.MASK:
        rates *= space.is_mask(xt)[..., None]
    np.put_along_axis(rates, xt[..., None], 0.0, axis=-1)
    return rates


def transition_probs(rates: np.ndarray, xt: np.ndarray, dt: float) -> np.ndarray:
    """Euler transition ``delta(xt, j) + R(xt, j) dt`` as a valid categorical.

    When the off-diagonal jump mass exceeds 1 it is renormalised and the
    stay probability becomes 0.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    xt = np.asarray(xt)
    jump = np.array(rates, dtype=float) * dt
    np.put_along_axis(jump, xt[..., None], 0.0, axis=-1)
    total = jump.sum(axis=-1, keepdims=True)
    over = total > 1.0
    jump = np.where(over, jump / np.where(over, total, 1.0), jump)
    stay = 1.0 - np.minimum(total, 1.0)
    np.put_along_axis(jump, xt[..., None], stay, axis=-1)
    return jump


def sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw along the last axis with pre-drawn uniforms ``u``."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < u[..., None] * cdf[..., -1:]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def reverse_step(kind, space: DiscreteSpace, probs: np.ndarray, xt: np.ndarray, t: float,
                 dt: float, u: np.ndarray) -> np.ndarray:
    """One factorised Euler step of the reverse CTMC for every position."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t + dt > 1.0 + 1e-12:
        raise ValueError("dt must not exceed 1 - t")
    rates = expected_rates(kind, space, probs, xt, t)
    return sample_categorical(transition_probs(rates, xt, dt), u)


def finalize(kind, space: DiscreteSpace, probs: np.ndarray, xt: np.ndarray) -> np.ndarray:
    """Resolve residual masks to the denoiser argmax (lowest index on ties)."""
    kind = _check_kind(kind, space)
    xt = np.asarray(xt)
    if kind is not InterpolantKind.MASK:
        return xt.copy()
    return np.where(space.is_mask(xt), np.argmax(probs, axis=-1), xt)


def euler_step_position(dist_over_x1, xt: int, t: float, dt: float, kind, space: DiscreteSpace,
                        rng: np.random.Generator) -> int:
    """Single-position Euler step; see :func:`reverse_step` for the batched form."""
    probs = np.asarray(dist_over_x1, dtype=float)
    if probs.shape != (space.cardinality,) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
        raise ValueError("dist_over_x1 must be a categorical over the data symbols")
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = rng.random(())
    return int(reverse_step(kind, space, probs, np.asarray(xt), t, dt, np.asarray(u)))


DenoiserFn = Callable[[np.ndarray, float], np.ndarray]


def simulate_reverse_ctmc(seq0, denoiser_fn: DenoiserFn, I_max: int, kind, space: DiscreteSpace,
                          rng: np.random.Generator) -> np.ndarray:
    """Run the reverse CTMC from noise ``seq0`` to t = 1 in ``I_max`` steps.

    ``denoiser_fn(xt, t)`` maps a batch ``(N, H)`` to probabilities ``(N, H, |X|)``.
    Under masking the last step (t = 1 - dt) is a deterministic argmax fill of
    any position still masked, so ``I_max = 1`` is a pure argmax decode.
    """
    kind = _check_kind(kind, space)
    if I_max < 1:
        raise ValueError("I_max must be >= 1")
    x = np.array(seq0, dtype=np.int64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    dt = 1.0 / I_max
    for i in range(I_max):
        t = i * dt
        probs = denoiser_fn(x, t)
        if kind is InterpolantKind.MASK and i == I_max - 1:
            x = finalize(kind, space, probs, x)
        else:
            x = reverse_step(kind, space, probs, x, t, dt, rng.random(x.shape))
    return x[0] if squeeze else x


def exact_posterior(dataset: Sequence[Sequence[int]], weights, xt_seq, t: float, kind,
                    space: DiscreteSpace, on_inconsistent: str = "raise") -> np.ndarray:
    """Per-position posterior over clean symbols by enumerating the dataset.

    ``p(x1 | xt) ∝ w(x1) prod_k p_{t|1}(xt_k | x1_k)``, marginalised per position.
    ``xt_seq`` may be a single sequence ``(H,)`` or a batch ``(N, H)``.

    A row no dataset sequence can explain raises, or with
    ``on_inconsistent="prior"`` falls back to the dataset marginals. The
    factorised Euler sampler can reach such rows when two positions jump in
    the same step.
    """
    kind = _check_kind(kind, space)
    _check_time(t)
    data = np.asarray(dataset, dtype=np.int64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("dataset must be a non-empty list of equal-length sequences")
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    xt = np.asarray(xt_seq, dtype=np.int64)
    single = xt.ndim == 1
    if single:
        xt = xt[None]
    cond = interpolant_probs(kind, space, data, t)             # (D, H, V)
    lik = np.ones((xt.shape[0], data.shape[0]))
    for k in range(data.shape[1]):
        lik *= cond[:, k, :][:, xt[:, k]].T                   # (N, D)
    post = lik * w
    z = post.sum(axis=1, keepdims=True)
    dead = z[:, 0] <= 0
    if np.any(dead):
        if on_inconsistent != "prior":
            raise ValueError("no dataset sequence is consistent with xt")
        post[dead] = w
        z[dead] = 1.0
    post /= z
    onehot = np.eye(space.cardinality)[data]                    # (D, H, |X|)
    out = np.einsum("nd,dhx->nhx", post, onehot)
    return out[0] if single else out
