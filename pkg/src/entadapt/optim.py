"""Adam updates and learning-rate schedules shared by training and adaptation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "schedule_lr"]


@dataclass
class AdamState:
    """Per-parameter moment accumulators; `t` counts completed steps from 0."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update of every parameter named in `grads`.

    Parameter buffers are swapped wholesale; no recorded graph may be alive
    across the call.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - lr * update).astype(np.float32, copy=False)


def schedule_lr(schedule: str, base_lr: float, step: int, total_steps: int) -> float:
    """Learning rate for 0-based `step` of `total_steps`."""
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        if total_steps <= 0:
            return base_lr
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    raise ValueError(f"unknown schedule {schedule!r}")
