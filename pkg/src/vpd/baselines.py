"""GRPO, SDPO and the single-phase hybrids that mix them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .mstep import batch_distill
from .policy import (Context, GradientRecord, _logit_grad_into, next_token_logprobs,
                     token_logprobs)

STD_GUARD = 1e-6


@dataclass
class HybridConfig:
    omega_rl: float = 0.5
    omega_opd: float = 0.5
    ppo_clip: float = 0.2
    reweight_clip: float = 0.2
    alpha_start: float = 1.0
    alpha_schedule: str = "linear-decay-to-zero"
    total_steps_for_decay: int = 100
    standardize_sdpo: bool = False

    def __post_init__(self):
        if not 0 < self.ppo_clip < 1:
            raise ConfigError("hybrid.ppo_clip must lie in (0, 1)")
        if not 0 < self.reweight_clip < 1:
            raise ConfigError("hybrid.reweight_clip must lie in (0, 1)")
        if not 0 <= self.alpha_start <= 1:
            raise ConfigError("hybrid.alpha_start must lie in [0, 1]")
        if self.alpha_schedule not in ("constant", "linear-decay-to-zero"):
            raise ConfigError(f"unknown alpha schedule {self.alpha_schedule!r}")
        if self.total_steps_for_decay < 1:
            raise ConfigError("hybrid.total_steps_for_decay must be >= 1")

    def alpha(self, step: int) -> float:
        """Mixing coefficient after ``step`` updates."""
        if self.alpha_schedule == "constant":
            return self.alpha_start
        frac = max(0.0, 1.0 - step / self.total_steps_for_decay)
        return self.alpha_start * frac


@dataclass
class GroupAdvantages:
    group_id: int
    advantages: np.ndarray


def grpo_advantages(rewards, group_id: int = 0) -> GroupAdvantages:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ConfigError("GRPO groups need at least 2 rollouts")
    std = r.std()
    if std == 0.0:
        return GroupAdvantages(group_id, np.zeros_like(r))
    return GroupAdvantages(group_id, (r - r.mean()) / (std + STD_GUARD))


def clipped_surrogate(params, trajectories, token_advantages, clip: float, old_logprobs=None):
    """PPO-style clipped surrogate, averaged over tokens then trajectories.

    Returns ``(loss, grad)`` where ``loss`` is the negated surrogate.  Tokens
    whose clipped branch is active contribute no gradient.
    """
    grad = GradientRecord()
    if not trajectories:
        return 0.0, grad
    n = len(trajectories)
    total = 0.0
    for i, traj in enumerate(trajectories):
        adv = np.broadcast_to(np.asarray(token_advantages[i], dtype=np.float64), (len(traj.response),))
        old = np.asarray(traj.token_logprobs if old_logprobs is None else old_logprobs[i])
        ctx = Context(tuple(traj.prompt))
        T = len(traj.response)
        for t, tok in enumerate(traj.response):
            a = adv[t]
            if a == 0.0:
                continue
            c = ctx.extend(traj.response[:t])
            lp = next_token_logprobs(params, c)
            p = np.exp(lp)
            rho = np.exp(lp[tok] - old[t])
            unclipped = rho * a
            clipped = min(max(rho, 1.0 - clip), 1.0 + clip) * a
            total -= min(unclipped, clipped) / (T * n)
            if unclipped <= clipped:
                g = -p
                g[tok] += 1.0
                _logit_grad_into(grad, params, c, g, -unclipped / (T * n))
    return total, grad


def grpo_loss(batch, params, old_params, advantages, clip: float):
    """Clipped GRPO loss for trajectories with one scalar advantage each."""
    old = None
    if old_params is not None:
        old = [token_logprobs(old_params, Context(tuple(t.prompt)), t.response) for t in batch]
    return clipped_surrogate(params, batch, list(advantages), clip, old)


def sdpo_loss(items, params, teacher_snapshot, cfg):
    """Distillation toward the slowly updated teacher snapshot."""
    loss, grad, _ = batch_distill(params, items, cfg, teacher_snapshot)
    return loss, grad


def sdpo_token_advantage(traj, fb, params, teacher_params=None) -> np.ndarray:
    """Per-token teacher/student log-ratio, as plain values."""
    teacher_params = params if teacher_params is None else teacher_params
    lq = token_logprobs(teacher_params, Context(tuple(traj.prompt), tuple(fb.tokens)), traj.response)
    lp = token_logprobs(params, Context(tuple(traj.prompt)), traj.response)
    return lq - lp


def hybrid_joint_loss(trajectories, items, params, advantages, hybrid: HybridConfig, cfg,
                      teacher_snapshot=None):
    """omega_opd * SDPO loss + omega_rl * GRPO loss, with matching gradient."""
    ls, gs = sdpo_loss(items, params, teacher_snapshot, cfg)
    lg, gg = grpo_loss(trajectories, params, None, advantages, hybrid.ppo_clip)
    loss = hybrid.omega_opd * ls + hybrid.omega_rl * lg
    grad = GradientRecord().add_(gs, hybrid.omega_opd).add_(gg, hybrid.omega_rl)
    return loss, grad


def reshape_advantage(a_grpo, a_sdpo_t, hybrid: HybridConfig):
    return hybrid.omega_rl * a_grpo + hybrid.omega_opd * a_sdpo_t


def reweight_advantage(a_grpo: float, delta_t: float, alpha: float, eps_w: float) -> float:
    if not 0 < eps_w < 1:
        raise ConfigError("eps_w must lie in (0, 1)")
    w = np.exp(np.sign(a_grpo) * delta_t)
    return float(a_grpo * ((1.0 - alpha) + alpha * np.clip(w, 1.0 - eps_w, 1.0 + eps_w)))
