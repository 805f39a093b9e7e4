"""AdamW with decoupled weight decay and a cosine learning-rate schedule.

The schedule is stepped per optimizer step.  Weight decay is applied
directly to the parameter (never through the moments), and batch-norm
scale/shift tensors are excluded from decay so normalization cannot be
shrunk toward zero by regularization alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cmcr.errors import (
    NonFiniteGradientError,
    ShapeMismatchError,
    StepOutOfRangeError,
)


@dataclass(frozen=True)
class AdamWConfig:
    lr_init: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    total_steps: int = 1

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError("lr_init must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def lr_at(step: int, cfg: AdamWConfig) -> float:
    """Cosine decay: lr_init at step 0, zero at total_steps."""
    if step < 0 or step > cfg.total_steps:
        raise StepOutOfRangeError(
            f"step {step} outside [0, {cfg.total_steps}]")
    lr = cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * step / cfg.total_steps))
    return max(lr, 0.0)


class AdamW:
    """Optimizer over a named dict of parameter tensors (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], cfg: AdamWConfig,
                 no_decay: tuple[str, ...] = ()):
        self.cfg = cfg
        self.no_decay = frozenset(no_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        lr = lr_at(self.step_count, cfg)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatchError(
                    f"{name}: grad shape {g.shape} vs param {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in {name}")
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay != 0.0 and name not in self.no_decay:
                update = update + cfg.weight_decay * p
            p -= lr * update
