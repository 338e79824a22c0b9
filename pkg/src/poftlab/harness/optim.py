from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        if not self.params:
            raise ValueError("no trainable parameters (is the model frozen?)")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr == 0.0:
                continue
            if self.weight_decay and p.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1, shape: str = "cosine") -> float:
    """Learning rate for 0-based ``step``: linear warmup over the first
    ``ceil(warmup_fraction * total_steps)`` steps, then cosine or linear decay to 0."""
    if shape not in ("cosine", "linear"):
        raise ValueError(f"unknown schedule shape {shape!r}")
    warmup = math.ceil(warmup_fraction * total_steps)
    if step < warmup:
        return base_lr * (step + 1) / warmup
    decay_steps = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / decay_steps)
    if shape == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return base_lr * (1.0 - progress)
