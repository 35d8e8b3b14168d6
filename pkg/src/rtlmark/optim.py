"""Adam with coupled weight decay and polynomial learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericError(RuntimeError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              frozen=(), decoupled: bool = False) -> None:
    """Update every parameter that has a gradient and is not frozen, in place.

    Weight decay is added to the gradient (L2 penalty) unless ``decoupled``.
    """
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        if name in frozen or p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
        w = p.data
        dt = w.dtype.type
        if weight_decay and not decoupled:
            g = g + dt(weight_decay) * w
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name] = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = state.v[name] = dt(b2) * state.v[name] + dt(1 - b2) * (g * g)
        mhat = m / dt(1 - b1 ** t)
        vhat = v / dt(1 - b2 ** t)
        update = dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
        if weight_decay and decoupled:
            update = update + dt(lr * weight_decay) * w
        w -= update


def lr_at(step: int, total_steps: int, lr0: float = 1e-3, power: float = 0.9) -> float:
    """Polynomial decay ``lr0 * (1 - step / total) ** power``."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    return lr0 * (1.0 - step / total_steps) ** power
