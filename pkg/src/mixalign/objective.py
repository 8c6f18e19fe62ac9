"""Composite training objective and its weight schedules."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .distill import KdConfig
from .tensor import ShapeError, Tensor, as_tensor, softplus

__all__ = [
    "LossBreakdown",
    "bce_with_logits",
    "binary_logit",
    "dann_lambda",
    "kd_lambda",
    "total_loss",
]


@dataclass
class LossBreakdown:
    l_cls: float
    l_align: float
    l_kd: float
    lambda_align: float
    lambda_kd: float
    l_total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def binary_logit(logits: Tensor) -> Tensor:
    """Positive-class logit from a two-logit head: ``z1 - z0``."""
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"expected [B, 2] logits, got {logits.shape}")
    return logits[:, 1] - logits[:, 0]


def bce_with_logits(logit: Tensor, label) -> Tensor:
    """Mean of log(1 + exp(-s * logit)) with s = 2 * label - 1."""
    y = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    logit = as_tensor(logit)
    if logit.shape != y.shape:
        raise ShapeError(f"logit shape {logit.shape} does not match label shape {y.shape}")
    sign = 2.0 * y - 1.0
    return softplus(logit * (-sign)).mean()


def dann_lambda(progress: float, gamma: float = 10.0) -> float:
    """Domain-adaptation ramp 2 / (1 + exp(-gamma * p)) - 1, p clamped to [0, 1]."""
    p = min(max(float(progress), 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-gamma * p)) - 1.0


def kd_lambda(epoch: int, cfg: KdConfig) -> float:
    """Distillation weight, linearly warmed up over ``cfg.warmup_epochs``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.warmup_epochs == 0:
        return cfg.base_weight
    return cfg.base_weight * min(1.0, epoch / cfg.warmup_epochs)


def total_loss(l_cls, l_align, l_kd, lambda_align: float, lambda_kd: float) -> Tensor:
    if lambda_align < 0 or lambda_kd < 0:
        raise ValueError("loss weights must be non-negative")
    terms = [as_tensor(t) for t in (l_cls, l_align, l_kd)]
    for t in terms:
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError("non-finite loss term")
    l_cls, l_align, l_kd = terms
    return l_cls + l_align * lambda_align + l_kd * lambda_kd
