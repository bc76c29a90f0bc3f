"""Teacher refinement: unpaired preference optimisation on implicit rewards.

The implicit reward of a trajectory is ``beta * (log q(y | x, C) - log pi(y | x))``
with the student term frozen at the start of the E-step.  The intractable
``beta * log Z(x)`` offset is never computed; it is absorbed by the reward shift
``delta``, which only moves the decision threshold of the binary classifier.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PreconditionError
from .oracle import DistTable, conditionals, optimal_policy
from .policy import Context, GradientRecord, PolicyParams, logprob_grad, sequence_logprob

DELTA_RULES = ("batch-mean", "ema")
PRIOR_MODES = ("dynamic-student", "fixed-reference")


class DegenerateEStepBatch(Exception):
    """The batch lacks successes or failures, so the classifier loss is undefined."""


def neg_log_sigmoid(u):
    """-log sigmoid(u), stable for large |u|."""
    return np.logaddexp(0.0, -np.asarray(u, dtype=np.float64))


def sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(u, dtype=np.float64)))


@dataclass
class EStepState:
    beta: float = 0.1
    delta: float = 0.0
    delta_rule: str = "batch-mean"
    ema_rate: float = 0.1
    prior_mode: str = "dynamic-student"

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("beta must be > 0")
        if self.delta_rule not in DELTA_RULES:
            raise ConfigError(f"unknown delta rule {self.delta_rule!r}")
        if self.delta_rule == "ema" and not 0 < self.ema_rate <= 1:
            raise ConfigError("ema_rate must lie in (0, 1]")
        if self.prior_mode not in PRIOR_MODES:
            raise ConfigError(f"unknown prior mode {self.prior_mode!r}")


@dataclass
class EStepBatch:
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)
    frozen_student_logprobs: dict = field(default_factory=dict)

    @classmethod
    def build(cls, items, frozen: dict) -> "EStepBatch":
        """Partition ``(trajectory, feedback)`` pairs by reward, dropping feedback-less ones."""
        b = cls(frozen_student_logprobs=dict(frozen))
        for traj, fb in items:
            if not fb.active:
                continue
            if traj.key not in b.frozen_student_logprobs:
                raise PreconditionError(f"no frozen student likelihood for trajectory {traj.key}")
            (b.positives if traj.reward == 1 else b.negatives).append((traj, fb))
        return b

    @property
    def degenerate(self) -> bool:
        return not self.positives or not self.negatives


def freeze_student_logprobs(params: PolicyParams, trajectories) -> dict:
    """log pi(y | x) without feedback, captured once per E-step."""
    return {t.key: sequence_logprob(params, Context(t.prompt), t.response) for t in trajectories}


def teacher_context(traj, fb) -> Context:
    return Context(tuple(traj.prompt), tuple(fb.tokens))


def implicit_reward(params: PolicyParams, traj, fb, frozen_logprob, beta: float) -> float:
    if not fb.active:
        raise PreconditionError("implicit reward needs feedback")
    if frozen_logprob is None or not np.isfinite(frozen_logprob):
        raise PreconditionError("missing frozen student likelihood")
    return beta * (sequence_logprob(params, teacher_context(traj, fb), traj.response) - frozen_logprob)


def class_rewards(batch: EStepBatch, params: PolicyParams, beta: float):
    fz = batch.frozen_student_logprobs
    pos = np.array([implicit_reward(params, t, fb, fz[t.key], beta) for t, fb in batch.positives])
    neg = np.array([implicit_reward(params, t, fb, fz[t.key], beta) for t, fb in batch.negatives])
    return pos, neg


def reward_shift(batch: EStepBatch, params: PolicyParams, state: EStepState) -> float:
    """Update ``state.delta`` from the batch and return it."""
    if batch.degenerate:
        raise DegenerateEStepBatch("degenerate E-step batch: need both successes and failures")
    pos, neg = class_rewards(batch, params, state.beta)
    mid = 0.5 * (pos.mean() + neg.mean())
    if state.delta_rule == "batch-mean":
        state.delta = float(mid)
    else:
        state.delta = float((1.0 - state.ema_rate) * state.delta + state.ema_rate * mid)
    return state.delta


def bco_loss(batch: EStepBatch, params: PolicyParams, state: EStepState):
    """Binary-classifier loss on shifted implicit rewards and its parameter gradient.

    delta is a per-batch constant; no gradient flows through it or through the
    frozen student terms.
    """
    if batch.degenerate:
        raise DegenerateEStepBatch("degenerate E-step batch: need both successes and failures")
    beta, delta = state.beta, state.delta
    fz = batch.frozen_student_logprobs
    grad = GradientRecord()
    loss = 0.0
    for items, sign in ((batch.positives, 1.0), (batch.negatives, -1.0)):
        n = len(items)
        for traj, fb in items:
            ctx = teacher_context(traj, fb)
            u = sign * (beta * (sequence_logprob(params, ctx, traj.response) - fz[traj.key]) - delta)
            loss += float(neg_log_sigmoid(u)) / n
            # d/du -log sigmoid(u) = -(1 - sigmoid(u)); du/dlogq = sign * beta
            coef = -float(sigmoid(-u)) * sign * beta / n
            grad.add_(logprob_grad(params, ctx, traj.response), coef)
    return loss, grad


def dpo_pair_loss(r_pos: float, r_neg: float) -> float:
    return float(neg_log_sigmoid(r_pos - r_neg))


def decoupled_bound(r_pos: float, r_neg: float) -> float:
    """Right-hand side of the unpaired bound: -log s(r+) - log s(-r-)."""
    return float(neg_log_sigmoid(r_pos) + neg_log_sigmoid(-r_neg))


def estep_update(params: PolicyParams, batch: EStepBatch, state: EStepState,
                 lr: float, n_steps: int = 1) -> dict:
    """Compute delta once, then take ``n_steps`` descent steps on the BCO loss."""
    delta = reward_shift(batch, params, state)
    pos, neg = class_rewards(batch, params, state.beta)
    losses = []
    for _ in range(n_steps):
        loss, grad = bco_loss(batch, params, state)
        params.apply(grad, lr)
        losses.append(loss)
    return {
        "delta": delta,
        "mean_reward_pos": float(pos.mean()),
        "mean_reward_neg": float(neg.mean()),
        "loss": losses[0],
        "n_pos": len(batch.positives),
        "n_neg": len(batch.negatives),
    }


def analytic_estep(student_dist: DistTable, env, x, beta: float, feedback_ctx=None,
                   params: PolicyParams | None = None) -> DistTable:
    """Exact dynamic-prior teacher ``student * exp(r / beta) / Z_dyn``.

    With ``params`` (tabular) and ``feedback_ctx`` the result is also written
    into the store under the teacher-context keys, one logit row per prefix.
    """
    q = optimal_policy(student_dist, env, x, beta)
    if params is not None:
        if params.kind != "tabular":
            raise ConfigError("analytic E-step can only write into a tabular store")
        base = Context(tuple(x), None if feedback_ctx is None else tuple(feedback_ctx))
        for pre, row in conditionals(q, params.vocab.n_out).items():
            params.table[params.key(base.extend(pre))] = row.copy()
    return q
