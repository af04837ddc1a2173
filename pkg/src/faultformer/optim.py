"""AdamW with decoupled weight decay and a warmup + cosine one-cycle schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class LrSchedule:
    warmup_steps: int = 100
    min_lr: float = 1e-4
    max_lr: float = 1e-3
    total_steps: int = 1000

    def __post_init__(self):
        if not 0 < self.min_lr <= self.max_lr:
            raise ValueError(f"need 0 < min_lr <= max_lr, got {self.min_lr}, {self.max_lr}")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")

    @classmethod
    def fitted(cls, total_steps: int, warmup_steps: int = 100, min_lr: float = 1e-4,
               max_lr: float = 1e-3) -> "LrSchedule":
        """Schedule whose warmup is shortened when the run is too short for it."""
        total_steps = max(int(total_steps), 2)
        warmup = max(1, min(int(warmup_steps), total_steps - 1))
        return cls(warmup, min_lr, max_lr, total_steps)


def onecycle_lr(step: int, sched: LrSchedule) -> float:
    """Linear ramp from min_lr to max_lr, then cosine decay back to min_lr.

    Steps past ``total_steps`` return ``min_lr``.
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step >= sched.total_steps:
        return sched.min_lr
    if step <= sched.warmup_steps:
        return sched.min_lr + (sched.max_lr - sched.min_lr) * step / sched.warmup_steps
    frac = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.min_lr + 0.5 * (sched.max_lr - sched.min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr and eps must be positive, weight_decay non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


class MissingGradError(RuntimeError):
    pass


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float | None = None) -> None:
    """One in-place AdamW update of every parameter in ``params``.

    ``lr`` overrides ``state.lr`` for this step (used by the schedule).
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradError(f"parameters without gradient: {', '.join(missing[:5])}")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name} {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
