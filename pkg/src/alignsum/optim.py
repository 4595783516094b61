"""Adaptive-moment optimizer with gradient clipping and dev-driven LR halving."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter
from .errors import InvalidArgumentError


class AdamOptimizer:
    """Standard Adam over named parameters.

    `best_dev` tracks the best development score seen; the learning rate is
    halved whenever a new score comes in strictly below it (see
    :func:`lr_schedule_step`).
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        if not self.params:
            raise InvalidArgumentError("optimizer needs parameters")
        if lr <= 0:
            raise InvalidArgumentError("learning rate must be positive")
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.best_dev: float | None = None
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def clip_gradients(self, max_norm: float) -> float:
        """Scale all gradients so their global norm is at most `max_norm`."""
        total = 0.0
        for p in self.params:
            total += float((p.grad**2).sum())
        norm = float(np.sqrt(total))
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for p in self.params:
                p.grad *= scale
        return norm

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "step_count": self.step_count,
            "best_dev": self.best_dev,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    def load_state(self, state: dict, moments_m: dict, moments_v: dict) -> None:
        self.lr = float(state["lr"])
        self.step_count = int(state["step_count"])
        self.best_dev = state["best_dev"]
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        for p in self.params:
            self.m[p.name] = moments_m[p.name].copy()
            self.v[p.name] = moments_v[p.name].copy()


def lr_schedule_step(optimizer: AdamOptimizer, dev_score_current: float,
                     dev_score_best: float | None = None) -> AdamOptimizer:
    """Halve the learning rate when the dev score regresses below the best.

    Higher scores are better. With no explicit `dev_score_best`, the
    optimizer's own record is used and updated.
    """
    best = optimizer.best_dev if dev_score_best is None else dev_score_best
    if best is not None and dev_score_current < best:
        optimizer.lr /= 2.0
    optimizer.best_dev = dev_score_current if best is None else max(best, dev_score_current)
    return optimizer
