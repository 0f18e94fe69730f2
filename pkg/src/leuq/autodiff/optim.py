"""Adam with bias correction, operating on Tensor leaves or raw arrays."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DimensionError, NumericError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float | None = None) -> list[np.ndarray]:
    """One Adam update; returns the new parameter arrays and advances ``state``.

    ``None`` gradients are treated as zero. Moment buffers are created lazily
    on the first call.
    """
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise DimensionError(f"adam_step: param {i} has shape {p.shape}, grad {g.shape}")
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        with np.errstate(over="ignore", invalid="ignore"):
            v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
            new = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if not (np.isfinite(v).all() and np.isfinite(new).all()):
            # an overflowing second moment would otherwise silently freeze the parameter
            raise NumericError(f"adam_step: non-finite moment or update for parameter {i}")
        out.append(new)
    return out


class Adam:
    """Adam over a fixed list of leaf tensors (updated in place)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        new = adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr=lr)
        for p, arr in zip(self.params, new):
            p.data = arr


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 1:
        return lr_max
    t = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t))
