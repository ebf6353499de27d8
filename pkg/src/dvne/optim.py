"""Adam with linear warmup over a flat parameter vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 5e-4
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Updates ``values`` in place; entries outside ``trainable`` never change."""

    def __init__(self, size, cfg: AdamConfig = AdamConfig(), trainable=None):
        self.cfg = cfg
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step_count = 0
        self.trainable = None if trainable is None else np.asarray(trainable, dtype=bool)

    def learning_rate(self, step):
        if self.cfg.warmup <= 0:
            return self.cfg.lr
        return self.cfg.lr * min(1.0, (step + 1) / self.cfg.warmup)

    def step(self, values, grad):
        c = self.cfg
        if self.trainable is not None:
            grad = np.where(self.trainable, grad, 0.0)
        lr = self.learning_rate(self.step_count)
        self.step_count += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        m_hat = self.m / (1 - c.beta1**self.step_count)
        v_hat = self.v / (1 - c.beta2**self.step_count)
        update = lr * m_hat / (np.sqrt(v_hat) + c.eps)
        if self.trainable is not None:
            values[self.trainable] -= update[self.trainable]
        else:
            values -= update
        return values
