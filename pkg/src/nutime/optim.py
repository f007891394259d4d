"""AdamW with decoupled weight decay and the warmup + cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus hyperparameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    """One AdamW update in place. Weight decay is decoupled from the moments."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient/parameter shape mismatch for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + state.eps))
        p.data -= lr * state.weight_decay * p.data


@dataclass
class LrSchedule:
    """Linear warmup from 0 to base_lr, then cosine decay back to 0."""

    base_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int

    def __post_init__(self):
        if not (0 <= self.warmup_epochs <= self.total_epochs):
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a global step, 0 <= step <= total_steps."""
    total = schedule.total_steps
    warm = schedule.warmup_steps
    if not (0 <= step <= total):
        raise ValueError(f"step {step} outside schedule range [0, {total}]")
    if warm > 0 and step <= warm:
        return schedule.base_lr * step / warm
    if total == warm:
        return schedule.base_lr
    frac = (step - warm) / (total - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
