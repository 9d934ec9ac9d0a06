"""SGD with momentum and a linear-warmup + cosine-decay schedule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import NumericalError
from .layers import TensorBuffer


class OptimState:
    """Plain SGD + momentum. The effective learning rate ramps linearly
    from 0 over ``warmup_steps`` then follows a half-cosine down to 0 at
    ``total_steps``."""

    def __init__(
        self,
        base_lr: float,
        warmup_steps: int,
        total_steps: int,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
    ):
        if base_lr < 0 or warmup_steps < 0 or total_steps < warmup_steps:
            raise ValueError("need base_lr >= 0 and 0 <= warmup_steps <= total_steps")
        self.base_lr = float(base_lr)
        self.warmup_steps = int(warmup_steps)
        self.total_steps = int(total_steps)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._buffers: dict[int, np.ndarray] = {}

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        if span <= 0:
            return self.base_lr
        progress = min((step - self.warmup_steps) / span, 1.0)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def step(self, params: list[TensorBuffer], step_index: int):
        """Momentum update with weight decay; zeroes gradients afterwards."""
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in {p.name}")
        lr = self.lr_at(step_index)
        for p in params:
            buf = self._buffers.get(id(p))
            if buf is None:
                buf = np.zeros_like(p.values)
                self._buffers[id(p)] = buf
            buf *= self.momentum
            buf += p.grad
            if self.weight_decay:
                buf += self.weight_decay * p.values
            p.values -= lr * buf
            p.zero_grad()
