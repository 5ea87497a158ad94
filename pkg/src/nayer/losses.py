"""Generator and student objectives.

Generator composite: alpha_cls * CE(teacher, pseudo-labels)
                     - alpha_adv * KL(teacher || student)
                     + alpha_bn * BN-statistic penalty.
Student objective: the same teacher-student KL on replayed batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NonFiniteLossError, ShapeError
from .models import BNStatRecord


@dataclass
class LossWeights:
    alpha_cls: float = 0.5
    alpha_adv: float = 1.33
    alpha_bn: float = 10.0
    kl_temperature: float = 1.0

    def __post_init__(self) -> None:
        if min(self.alpha_cls, self.alpha_adv, self.alpha_bn) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.kl_temperature <= 0:
            raise ValueError("kl_temperature must be positive")


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteLossError(f"{name} contains non-finite values")


def loss_ce(teacher_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the teacher's logits against the pseudo-labels."""
    _check_finite("teacher_logits", teacher_logits)
    return F.cross_entropy(teacher_logits, labels)


def loss_kl(teacher_logits: torch.Tensor, student_logits: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Mean KL(softmax(t/tau) || softmax(s/tau)) * tau^2 over the batch.

    Zero exactly when the two softened distributions coincide row-wise; the
    tau^2 factor keeps gradient magnitudes comparable across temperatures.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(f"logit shapes differ: {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}")
    _check_finite("teacher_logits", teacher_logits)
    _check_finite("student_logits", student_logits)
    # Log-space form: p * (log_p - log_q) with p = exp(log_p) stays finite in
    # forward and backward even when softmax entries underflow to exact zero
    # (gradients flow through the teacher side during generator training).
    log_p = F.log_softmax(teacher_logits / tau, dim=1)
    log_q = F.log_softmax(student_logits / tau, dim=1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()
    return kl * (tau * tau)


def loss_bn(records: list[BNStatRecord]) -> torch.Tensor:
    """Sum over BN layers of squared L2 gaps between batch and running stats."""
    if not records:
        raise ShapeError("loss_bn requires at least one BN record")
    total = None
    for r in records:
        term = torch.sum((r.batch_mean - r.running_mean) ** 2) + torch.sum((r.batch_var - r.running_var) ** 2)
        total = term if total is None else total + term
    return total


def loss_generator(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    labels: torch.Tensor,
    records: list[BNStatRecord],
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted composite plus the raw term breakdown (keys ce, kl_adv, bn, total)."""
    ce = loss_ce(teacher_logits, labels)
    kl = loss_kl(teacher_logits, student_logits, weights.kl_temperature)
    bn = loss_bn(records)
    total = weights.alpha_cls * ce - weights.alpha_adv * kl + weights.alpha_bn * bn
    breakdown = {"ce": float(ce.detach()), "kl_adv": float(kl.detach()),
                 "bn": float(bn.detach()), "total": float(total.detach())}
    return total, breakdown


def loss_student(teacher_logits: torch.Tensor, student_logits: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Distillation objective for the student: teacher-student KL."""
    return loss_kl(teacher_logits, student_logits, tau)
