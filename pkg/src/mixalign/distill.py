"""Exponential-moving-average teacher and temperature-scaled distillation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, detach, log_softmax

__all__ = ["KdConfig", "EmaTeacher", "ema_update", "kd_loss"]


@dataclass
class KdConfig:
    temperature: float = 2.0
    base_weight: float = 0.5
    warmup_epochs: int = 10

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.base_weight < 0:
            raise ValueError(f"base_weight must be >= 0, got {self.base_weight}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


class EmaTeacher:
    """Frozen mirror of the student's parameters, moved toward it after each step.

    Parameters are plain arrays keyed like the student's, so nothing in the
    teacher can ever join a gradient tape.
    """

    def __init__(self, student_params: dict[str, Tensor], momentum: float = 0.999, warmup: bool = False):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum
        self.warmup = warmup
        self.params = {name: p.data.copy() for name, p in student_params.items()}

    def momentum_at(self, step: int) -> float:
        """Momentum for the update after optimizer step ``step`` (0-based).

        With ``warmup`` the value is ``min(m, (1 + step) / (10 + step))``, the
        num-updates schedule of TensorFlow's moving averages. Early on the
        teacher averages roughly the last ``step / 9`` iterates, so it follows
        the student instead of its random start; ``m`` applies from
        ``step = (10m - 1) / (1 - m)`` on (8990 for m = 0.999).
        """
        if not self.warmup:
            return self.momentum
        return min(self.momentum, (1.0 + step) / (10.0 + step))

    def update(self, student_params: dict[str, Tensor], step: int | None = None) -> None:
        m = self.momentum if step is None else self.momentum_at(step)
        ema_update(self, student_params, m)

    def as_tensors(self) -> dict[str, Tensor]:
        return {name: Tensor(value) for name, value in self.params.items()}


def ema_update(teacher: EmaTeacher, student_params: dict[str, Tensor], m: float) -> None:
    """In place: ``teacher <- m * teacher + (1 - m) * student``."""
    if set(teacher.params) != set(student_params):
        raise ShapeError("teacher and student parameter sets differ")
    for name, theta_t in teacher.params.items():
        theta_s = student_params[name].data
        if theta_t.shape != theta_s.shape:
            raise ShapeError(f"{name}: teacher {theta_t.shape} vs student {theta_s.shape}")
        theta_t *= m
        theta_t += (1.0 - m) * theta_s


def kd_loss(z_student: Tensor, z_teacher: Tensor, temperature: float) -> Tensor:
    """T^2 * KL(softmax(z_T/T) || softmax(z_S/T)), averaged over the batch.

    The teacher logits are detached here as well, so only the student
    receives gradient.
    """
    if z_student.shape != z_teacher.shape:
        raise ShapeError(f"logit shapes differ: {z_student.shape} vs {z_teacher.shape}")
    if not (np.all(np.isfinite(z_student.data)) and np.all(np.isfinite(z_teacher.data))):
        raise FloatingPointError("non-finite logits in distillation loss")
    T = float(temperature)
    log_p_teacher = log_softmax(detach(z_teacher).data / T, axis=-1)
    p_teacher = np.exp(log_p_teacher.data)
    log_p_student = log_softmax(z_student * (1.0 / T), axis=-1)
    per_sample = (Tensor(p_teacher) * (log_p_teacher - log_p_student)).sum(axis=-1)
    return per_sample.mean() * (T * T)
