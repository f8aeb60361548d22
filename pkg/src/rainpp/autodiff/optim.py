"""Decoupled-weight-decay Adam (AdamW) with optional cosine learning-rate decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    total_steps: int | None = None  # enables cosine decay when set
    warmup_steps: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.step < 0:
            raise ValueError("step counter must be non-negative")

    def current_lr(self) -> float:
        if self.step < self.warmup_steps:
            return self.lr * (self.step + 1) / self.warmup_steps
        if not self.total_steps:
            return self.lr
        span = max(self.total_steps - self.warmup_steps, 1)
        progress = min(self.step - self.warmup_steps, span) / span
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "total_steps": self.total_steps,
                "warmup_steps": self.warmup_steps, "step": self.step}


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptimState) -> None:
    """Update ``params`` in place; entries missing from ``grads`` are left untouched."""
    lr = state.current_lr()
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
