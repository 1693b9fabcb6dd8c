"""Adam with bias correction and the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ConfigurationError, NonFiniteGradientError
from .tensor import Parameter


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 3e-4
    decay: float = 0.95
    decay_every: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigurationError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigurationError(f"decay must lie in (0, 1], got {self.decay}")
        if self.decay_every < 1:
            raise ConfigurationError(f"decay_every must be >= 1, got {self.decay_every}")


def lr_at(epoch: int, cfg: OptimConfig = OptimConfig()) -> float:
    """``lr0 * decay ** floor(epoch / decay_every)``."""
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


class Adam:
    def __init__(self, params: Sequence[Parameter], cfg: OptimConfig = OptimConfig()):
        self.params: List[Parameter] = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        """Apply one update from the parameters' accumulated ``.grad``."""
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(
                    f"non-finite gradient in parameter {p.name or i!r} at step {self.t + 1}")
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)
