"""Training objectives for block recasting and distillation fine-tuning."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor


def mse_activation_loss(student_act: Tensor, teacher_act: Tensor) -> Tensor:
    """Squared activation error, normalized per element and averaged over the batch.

    For a batch of B samples whose activation has N elements each this is
    ``sum((teacher - student)**2) / (B * N)``.  The teacher side never
    receives a gradient.
    """
    if student_act.shape != teacher_act.shape:
        raise ShapeError(
            f"activation shapes differ: student {student_act.shape} vs teacher {teacher_act.shape} "
            "(was the next block rebuilt for the reduced width?)"
        )
    return ops.mse_loss(student_act, teacher_act.detach())


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, labels, mse_weight: float = 1.0) -> Tensor:
    """Logit MSE (same normalization as the activation loss) plus label cross-entropy.

    ``mse_weight=0`` drops the teacher term, leaving plain cross-entropy.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"kd_loss: student logits {student_logits.shape} vs teacher {teacher_logits.shape}")
    ce = ops.cross_entropy(student_logits, labels)
    if not mse_weight:
        return ce
    mse = mse_activation_loss(student_logits, teacher_logits)
    if mse_weight != 1.0:
        mse = ops.mul(mse, Tensor(np.asarray(mse_weight, dtype=mse.dtype)))
    return ops.add(mse, ce)
