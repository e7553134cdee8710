"""AdamW with decoupled weight decay, plus the learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class OptState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: list[Tensor], lr: float, weight_decay: float, state: OptState) -> None:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if weight_decay < 0:
        raise ValueError(f"weight decay must be non-negative, got {weight_decay}")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        g = p.grad
        if g is None:
            continue
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grad(params: list[Tensor]) -> None:
    for p in params:
        p.zero_grad()


@dataclass(frozen=True)
class LRSchedule:
    """kind: ``constant``, ``linear`` (to ``final_ratio`` of base) or ``cosine``
    (linear warmup, then cosine from base to ``final_ratio`` of base)."""

    kind: str = "constant"
    base: float = 1e-4
    final_ratio: float = 1.0
    warmup_frac: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base <= 0:
            raise ValueError("base learning rate must be positive")

    def lr(self, step: int, total: int) -> float:
        if self.kind == "constant" or total <= 1:
            return self.base
        frac = step / (total - 1)
        final = self.base * self.final_ratio
        if self.kind == "linear":
            return self.base + (final - self.base) * frac
        warm = int(round(self.warmup_frac * total))
        if step < warm:
            return self.base * (step + 1) / warm
        t = (step - warm) / max(total - 1 - warm, 1)
        return final + 0.5 * (self.base - final) * (1.0 + math.cos(math.pi * t))
