"""AdamW, global-norm gradient clipping and plateau learning-rate decay."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["NonFiniteGradientError", "AdamW", "clip_grad_norm", "ReduceLROnPlateau"]


class NonFiniteGradientError(FloatingPointError):
    pass


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class AdamW:
    """Adam with decoupled weight decay on a dict of named arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0
        self.exp_avg = {k: np.zeros_like(v) for k, v in params.items()}
        self.exp_avg_sq = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(grads)
        if missing:
            raise KeyError(f"no gradient for parameters {sorted(missing)}")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for {name}")
        self.step_count += 1
        beta1, beta2 = self.betas
        bias1 = 1.0 - beta1 ** self.step_count
        bias2 = 1.0 - beta2 ** self.step_count
        for name, theta in self.params.items():
            g = grads[name]
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            theta *= 1.0 - self.lr * self.weight_decay
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            denom = np.sqrt(v / bias2) + self.eps
            theta -= self.lr * (m / bias1) / denom

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.exp_avg.items()}
        out.update({f"adam.v.{k}": v for k, v in self.exp_avg_sq.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.exp_avg[k][...] = arrays[f"adam.m.{k}"]
            self.exp_avg_sq[k][...] = arrays[f"adam.v.{k}"]
        self.step_count = step_count


class ReduceLROnPlateau:
    """Multiply the learning rate by ``factor`` once a higher-is-better metric stalls.

    A reduction happens after ``patience`` consecutive epochs that fail to beat
    the best value by more than ``min_delta``; the count then restarts.
    """

    def __init__(self, lr: float, patience: int = 5, factor: float = 0.5, min_delta: float = 1e-4, lr_min: float = 1e-5):
        if not 0 < factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_delta = min_delta
        self.lr_min = lr_min
        self.best = -math.inf
        self.num_bad = 0

    def step(self, metric: float) -> float:
        if metric > self.best + self.min_delta:
            self.best = metric
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.lr_min)
                self.num_bad = 0
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "best": self.best, "num_bad": self.num_bad}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.best = state["best"]
        self.num_bad = state["num_bad"]
