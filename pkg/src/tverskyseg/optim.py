"""Adam with bias correction and a plateau-halving learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step rejected")
        self.name = name


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """Update ``params`` in place and return the advanced state.

    All gradients are validated before anything is touched, so a rejected
    step leaves parameters and state unchanged.
    """
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2) + state.eps
        p -= ((lr / bc1) * m / denom).astype(p.dtype, copy=False)
    return state


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 0.005
    current_lr: float = 0.005
    decay_factor: float = 0.5
    patience: int = 10
    floor_lr: float = 1e-5
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0

    @classmethod
    def start(cls, initial_lr=0.005, decay_factor=0.5, patience=10, floor_lr=1e-5) -> "LrSchedule":
        if not 0 < floor_lr <= initial_lr:
            raise ValueError(f"need 0 < floor_lr <= initial_lr, got {floor_lr}, {initial_lr}")
        if not 0 < decay_factor < 1:
            raise ValueError(f"decay_factor must lie in (0, 1), got {decay_factor}")
        return cls(initial_lr, initial_lr, decay_factor, patience, floor_lr)


def lr_update(schedule: LrSchedule, epoch_val_loss: float) -> LrSchedule:
    if epoch_val_loss < schedule.best_val_loss:
        return replace(schedule, best_val_loss=epoch_val_loss, epochs_since_improvement=0)
    stale = schedule.epochs_since_improvement + 1
    if stale >= schedule.patience:
        lr = max(schedule.current_lr * schedule.decay_factor, schedule.floor_lr)
        return replace(schedule, current_lr=lr, epochs_since_improvement=0)
    return replace(schedule, epochs_since_improvement=stale)
