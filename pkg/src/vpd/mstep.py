"""Student distillation toward the stop-gradient, feedback-conditioned teacher."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, PreconditionError
from .policy import (Context, GradientRecord, PolicyParams, _logit_grad_into,
                     next_token_dist, token_logprobs)

DIVERGENCES = tuple(kernels.DIVERGENCE_KINDS)
TEACHER_SOURCES = ("shared-current", "ema-snapshot")


@dataclass
class DistillConfig:
    divergence: str = "reverse-kl"
    teacher_params_source: str = "shared-current"
    learning_rate: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if self.divergence not in DIVERGENCES:
            raise ConfigError(f"unknown divergence {self.divergence!r}")
        if self.teacher_params_source not in TEACHER_SOURCES:
            raise ConfigError(f"unknown teacher source {self.teacher_params_source!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError("reduction must be 'mean' or 'sum'")


def token_divergence(student_dist, teacher_dist, kind: str) -> float:
    return kernels.token_divergence(student_dist, teacher_dist, kernels.DIVERGENCE_KINDS[kind])


def distill_loss(params: PolicyParams, traj, fb, cfg: DistillConfig, teacher_params=None):
    """Per-token divergence summed (or averaged) over the trajectory.

    Teacher distributions are read as plain values, so the returned gradient
    only contains student-context terms.
    """
    if fb is None or not fb.active:
        raise PreconditionError("distillation needs feedback")
    teacher_params = params if teacher_params is None else teacher_params
    kind = kernels.DIVERGENCE_KINDS[cfg.divergence]
    student = Context(tuple(traj.prompt))
    teacher = Context(tuple(traj.prompt), tuple(fb.tokens))
    y = traj.response
    scale = 1.0 / len(y) if cfg.reduction == "mean" else 1.0
    loss = 0.0
    grad = GradientRecord()
    for t in range(len(y)):
        s_ctx = student.extend(y[:t])
        q = next_token_dist(teacher_params, teacher.extend(y[:t]))
        val, g = kernels.divergence_logit_grad(params.logits(s_ctx), q, kind)
        loss += scale * val
        _logit_grad_into(grad, params, s_ctx, g, scale)
    return loss, grad


def importance_ratio(traj, current_params: PolicyParams) -> np.ndarray:
    """Per-token pi_current / pi_generation; diagnostic only."""
    cur = token_logprobs(current_params, Context(tuple(traj.prompt)), traj.response)
    return np.exp(cur - np.asarray(traj.token_logprobs))


def batch_distill(params: PolicyParams, items, cfg: DistillConfig, teacher_params=None):
    """Mean distillation loss and gradient over ``(trajectory, feedback)`` pairs."""
    items = [(t, fb) for t, fb in items if fb is not None and fb.active]
    grad = GradientRecord()
    if not items:
        return 0.0, grad, 0
    total = 0.0
    for traj, fb in items:
        loss, g = distill_loss(params, traj, fb, cfg, teacher_params)
        total += loss
        grad.add_(g, 1.0 / len(items))
    return total / len(items), grad, len(items)
