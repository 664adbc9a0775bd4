"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .engine import Tensor


class OptimizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float
    lr_min: float = 0.0
    total_steps: int = 1
    warmup_steps: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")


def cosine_lr(schedule: LrSchedule, step: int) -> float:
    """Linear warmup to ``lr_max``, then cosine decay to ``lr_min`` at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.lr_max * step / w
    span = schedule.total_steps - w
    t = 1.0 if span == 0 else (step - w) / span
    return schedule.lr_min + (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * t)) / 2.0


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float, grads: dict | None = None) -> None:
    """One AdamW update over named parameters, in place.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient are skipped (their moments are untouched).
    """
    if lr < 0:
        raise OptimizerError(f"negative learning rate {lr}")
    todo = []
    for name in sorted(params):
        p = params[name]
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        g = np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise OptimizerError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        todo.append((name, p, g))
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p, g in todo:
        if name not in state.exp_avg:
            state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        if not p.data.flags.c_contiguous or not p.data.flags.writeable:
            p.data = np.array(p.data, order="C")
        kernels.adamw_update(p.data, g, state.exp_avg[name], state.exp_avg_sq[name], float(lr),
                             state.beta1, state.beta2, state.eps, state.weight_decay, bc1, bc2)
