"""SGD with momentum, Adam, and validation-plateau learning-rate decay."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import NetworkParams

LR_FLOOR = 1e-7


class SGDMomentum:
    def __init__(self, params: NetworkParams, lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        for name, t in self.params.items():
            if t.grad is None:
                continue
            v = self._velocity[name]
            v *= self.momentum
            v += t.grad
            t.data = t.data - self.lr * v


class Adam:
    def __init__(self, params: NetworkParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, t in self.params.items():
            if t.grad is None:
                continue
            m, v = self._m[name], self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * t.grad
            v *= self.b2
            v += (1.0 - self.b2) * t.grad * t.grad
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: NetworkParams, lr: float):
    if name == "sgd_momentum":
        return SGDMomentum(params, lr, momentum=0.9)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


def lr_plateau_step(history: Sequence[float], current_lr: float, patience: int,
                    last_decay: int = 0, factor: float = 0.1, floor: float = LR_FLOOR) -> float:
    """Learning rate for the next epoch given validation errors so far.

    The rate is divided by 10 once the best error (first occurrence) is at
    least ``patience`` epochs old, counting the epoch that set it. Epochs
    before ``last_decay`` (the history length when the previous decay fired)
    do not count, so one plateau triggers one decay per window. An epoch that
    sets a new best never triggers a decay.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    n = len(history)
    if n == 0:
        return current_lr
    best = int(np.argmin(history))
    if best == n - 1:
        return current_lr
    stale = n - max(best, last_decay)
    if stale >= patience and current_lr > floor:
        return max(current_lr * factor, floor)
    return current_lr


class PlateauScheduler:
    """Stateful wrapper around :func:`lr_plateau_step`."""

    def __init__(self, lr: float, patience: int = 10):
        self.lr = lr
        self.patience = patience
        self.history: list[float] = []
        self._last_decay = 0

    def step(self, val_error: float) -> float:
        self.history.append(float(val_error))
        new = lr_plateau_step(self.history, self.lr, self.patience, self._last_decay)
        if new != self.lr:
            self._last_decay = len(self.history)
        self.lr = new
        return new
