"""SGD with momentum, weight decay and a step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class SGDState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    step_size: int = 0  # decay every ``step_size`` steps; 0 disables
    gamma: float = 0.1
    clip_norm: float = 0.0  # rescale the global gradient norm to at most this; 0 disables
    steps: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.step_size <= 0:
            return self.lr
        return self.lr * self.gamma ** (self.steps // self.step_size)


def sgd_step(params: dict[str, Tensor], state: SGDState) -> SGDState:
    """Apply one update in place from the ``.grad`` fields; parameters without a grad are skipped."""
    lr = state.current_lr()
    scale = 1.0
    if state.clip_norm > 0:
        norm = np.sqrt(sum(float(np.sum(p.grad**2)) for p in params.values() if p.grad is not None))
        if norm > state.clip_norm:
            scale = state.clip_norm / norm
    for name, p in params.items():
        if p.grad is None:
            continue
        g = scale * p.grad + state.weight_decay * p.data
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        state.velocity[name] = v
        if lr != 0.0:
            p.data = p.data - lr * v
        p.grad = None
    state.steps += 1
    return state
