"""Server-side student training on one key frame.

Mirrors the online training loop: evaluate first, skip entirely if the
student already clears the threshold, otherwise take Adam steps until the
metric beats the threshold or the step cap is hit, tracking the best
snapshot along the way.  Optimizer moments live on the student and persist
across key frames within a session.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .metrics import argmax_segmap, mean_iou, weight_mask, weighted_ce_loss
from .models import StudentModel, forward_recorded


@dataclass(frozen=True)
class AlgoParams:
    threshold: float = 0.8
    max_updates: int = 8
    min_stride: int = 8
    max_stride: int = 64
    loss_weight: float = 5.0
    loss_radius: int = 2

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.max_updates < 1:
            raise ValueError("max_updates must be >= 1")
        if self.min_stride < 1 or self.max_stride < self.min_stride:
            raise ValueError("need 1 <= min_stride <= max_stride")


@dataclass
class DistillResult:
    student: StudentModel
    best_metric: float
    steps_taken: int
    initial_metric: float


def train_student(
    student: StudentModel,
    pixels: np.ndarray,
    label: np.ndarray,
    params: AlgoParams,
) -> DistillResult:
    """Adapt the student to one (frame, pseudo-label) pair.

    The student is updated in place and ends up holding the best-metric
    parameters seen during the loop (its Adam moments reflect the last step
    taken).  Entry uses a strict ``<`` against the threshold and the loop
    breaks on a strict ``>``, so a metric exactly at the threshold skips
    training but would not break the loop.
    """
    tape, probs = forward_recorded(student, pixels)
    initial_metric = mean_iou(argmax_segmap(probs.data[0]), label)
    best_metric = initial_metric
    steps = 0
    if best_metric < params.threshold:
        best_snapshot = {k: v.copy() for k, v in student.trainable_params().items()}
        mask = weight_mask(label, w=params.loss_weight, r=params.loss_radius)
        for _ in range(params.max_updates):
            loss = weighted_ce_loss(probs, label, mask)
            grads = T.backward_partial(loss.tape)
            T.adam_step(student.trainable_params(), grads, student.adam)
            steps += 1
            tape, probs = forward_recorded(student, pixels)
            metric = mean_iou(argmax_segmap(probs.data[0]), label)
            if metric > best_metric:
                best_metric = metric
                best_snapshot = {k: v.copy() for k, v in student.trainable_params().items()}
            if metric > params.threshold:
                break
        for key, values in best_snapshot.items():
            student.params[key][...] = values
    return DistillResult(
        student=student,
        best_metric=best_metric,
        steps_taken=steps,
        initial_metric=initial_metric,
    )
