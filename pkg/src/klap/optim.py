"""Adam with bias correction and a cosine-annealed learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LengthError

LR_INIT = 2e-4
LR_MIN = 1e-6


def cosine_lr(step: int, total_steps: int, lr0: float = LR_INIT, lr_min: float = LR_MIN) -> float:
    if total_steps <= 0:
        return lr0
    t = min(step, total_steps)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    total_steps: int
    lr0: float = LR_INIT
    lr_min: float = LR_MIN
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    cosine: bool = True

    @classmethod
    def create(cls, size: int, total_steps: int, dtype=np.float64, **kw) -> "AdamState":
        return cls(np.zeros(size, dtype), np.zeros(size, dtype), total_steps, **kw)

    @property
    def lr(self) -> float:
        if not self.cosine:
            return self.lr0
        return cosine_lr(self.step, self.total_steps, self.lr0, self.lr_min)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              index: np.ndarray | None = None) -> np.ndarray:
    """One in-place Adam update; returns ``params``.

    With ``index`` only those entries (and their moments) are touched, so
    everything else stays bit-identical.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise LengthError(f"length mismatch: params {params.shape}, grads {grads.shape}, "
                          f"state {state.m.shape}")
    lr = state.lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    sel = slice(None) if index is None else index
    g = grads[sel].astype(state.m.dtype)
    m = b1 * state.m[sel] + (1 - b1) * g
    v = b2 * state.v[sel] + (1 - b2) * g * g
    state.m[sel] = m
    state.v[sel] = v
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    params[sel] = params[sel] - (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params.dtype)
    return params
