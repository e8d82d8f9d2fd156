"""Adam and the cosine-annealing-with-warm-restarts schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One in-place Adam update; weight decay enters as ``wd * param`` in the gradient.

    Parameters without a gradient entry are left untouched.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        for acc in (state.m, state.v):
            if name in acc and acc[name].shape != p.shape:
                raise ValueError(f"moment shape {acc[name].shape} does not match parameter {name} {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - update).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    T_0: int = 10
    T_mult: int = 2
    eta_min: float = 0.0

    def __post_init__(self):
        if self.T_0 < 1 or self.T_mult < 1:
            raise ValueError("T_0 and T_mult must be >= 1")
        if not 0 <= self.eta_min <= self.base_lr:
            raise ValueError("need 0 <= eta_min <= base_lr")


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Learning rate at ``epoch`` (0-based, fractional allowed)."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    t_i = schedule.T_0
    t_cur = epoch
    if schedule.T_mult == 1:
        t_cur = epoch % t_i
    else:
        while t_cur >= t_i:
            t_cur -= t_i
            t_i *= schedule.T_mult
    lo, hi = schedule.eta_min, schedule.base_lr
    return lo + 0.5 * (hi - lo) * (1 + math.cos(math.pi * t_cur / t_i))
