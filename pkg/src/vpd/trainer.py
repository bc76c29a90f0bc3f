"""The co-evolutionary training loop and the baselines that share it.

Every method consumes the same rollout batch for a given ``(seed, batch)``:
random streams are derived from ``(seed, purpose, batch, prompt, rollout)``
rather than carried as mutable state, which is what makes checkpoint resume
bit-exact.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels, oracle
from .baselines import (clipped_surrogate, grpo_advantages, hybrid_joint_loss, reshape_advantage,
                        reweight_advantage, sdpo_loss, sdpo_token_advantage)
from .config import TrainConfig
from .env import FeedbackRecord, make_feedback, sample_prompt, target, verify
from .estep import (DegenerateEStepBatch, EStepBatch, EStepState, analytic_estep, class_rewards,
                    estep_update, freeze_student_logprobs, implicit_reward)
from .mstep import DistillConfig, batch_distill, importance_ratio
from .policy import (Context, GradientRecord, PolicyParams, Trajectory, dumps_params, ema_update,
                     greedy_decode, loads_params, sample_trajectory)

log = logging.getLogger(__name__)

_PROMPT, _ROLLOUT, _EVAL = 1, 2, 3
COUNTERS = ("degenerate_estep", "feedback_none", "zero_gradient_batches", "estep_runs")


def stream(seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


@dataclass
class TrainState:
    params: PolicyParams
    ref: PolicyParams
    estep: EStepState
    teacher_snapshot: PolicyParams | None = None
    batch_index: int = 0
    mstep_updates: int = 0
    velocity: dict = field(default_factory=dict)
    counters: dict = field(default_factory=lambda: dict.fromkeys(COUNTERS, 0))


def init_state(cfg: TrainConfig) -> TrainState:
    vocab = cfg.env.vocab
    params = PolicyParams(vocab, cfg.policy_kind, max_len=cfg.env.response_len)
    if cfg.wrong_bias:
        # Bias every prompt's first step toward a fixed wrong token.
        for x in cfg.env.all_prompts():
            z = np.zeros(vocab.n_out)
            z[(target(cfg.env, x)[0] + 1) % cfg.env.vocab_size] = cfg.wrong_bias
            params.table[params.key(Context(x))] = z
    state = TrainState(
        params=params,
        ref=params.copy(),
        estep=EStepState(cfg.beta, 0.0, cfg.delta_rule, cfg.delta_ema_rate, cfg.prior_mode),
    )
    if cfg.method in ("sdpo", "hybrid-joint", "hybrid-reshape", "hybrid-reweight"):
        state.teacher_snapshot = params.copy()
    return state


def distill_config(cfg: TrainConfig) -> DistillConfig:
    source = "shared-current" if cfg.method == "vpd" else "ema-snapshot"
    return DistillConfig(cfg.divergence, source, cfg.mstep_lr, cfg.distill_reduction)


def eval_prompt_set(cfg: TrainConfig) -> list:
    env = cfg.env
    if env.vocab_size ** env.prompt_len <= cfg.eval_prompts:
        return env.all_prompts()
    rng = stream(cfg.seed, _EVAL)
    return [sample_prompt(env, rng) for _ in range(cfg.eval_prompts)]


def evaluate(params: PolicyParams, env, prompt_set, decode: str = "greedy", trials: int = 1,
             rng=None) -> float:
    """Fraction of prompts whose decoded response is correct."""
    if decode == "greedy":
        hits = [verify(env, x, greedy_decode(params, Context(tuple(x)), env.response_len)).reward
                for x in prompt_set]
        return float(np.mean(hits))
    rng = np.random.default_rng(rng)
    hits = []
    for _ in range(trials):
        for x in prompt_set:
            traj = sample_trajectory(params, Context(tuple(x)), rng, env.response_len)
            hits.append(verify(env, x, traj.response).reward)
    return float(np.mean(hits))


def reward_margin(batch: EStepBatch, params: PolicyParams, beta: float):
    """Mean implicit reward of successes minus failures; None if a class is empty."""
    if batch.degenerate:
        return None
    pos, neg = class_rewards(batch, params, beta)
    return float(pos.mean() - neg.mean())


# --- rollout and feedback ---------------------------------------------------------------

def collect_rollouts(state: TrainState, cfg: TrainConfig, b: int):
    """Sample prompts and N student rollouts each; attach rewards and feedback."""
    env = cfg.env
    groups = []
    for i in range(cfg.prompts_per_batch):
        x = sample_prompt(env, stream(cfg.seed, _PROMPT, b, i))
        group = []
        for j in range(cfg.rollouts_per_prompt):
            traj = sample_trajectory(state.params, Context(x), stream(cfg.seed, _ROLLOUT, b, i, j),
                                     env.response_len, group_id=i, rollout_index=j)
            traj.reward = verify(env, x, traj.response).reward
            group.append(traj)
        for traj in group:
            traj.feedback = make_feedback(env, cfg.feedback_mode, x, traj, group)
        groups.append((x, group))
    return groups


def estep_items(groups, cfg: TrainConfig):
    """(trajectory, feedback) pairs for the E-step.

    In sibling mode a lone success has no other success to point at; it joins
    the positive set conditioned on its own response.
    """
    items = []
    for x, group in groups:
        for traj in group:
            fb = traj.feedback
            if (cfg.feedback_mode == "contrastive-sibling" and not fb.active and traj.reward == 1):
                fb = FeedbackRecord("contrastive-sibling",
                                    (cfg.env.vocab.token("SIB"),) + tuple(traj.response),
                                    source_trajectory=traj.key)
            items.append((traj, fb))
    return items


# --- optimisation ---------------------------------------------------------------------

def descend(state: TrainState, grad: GradientRecord, lr: float, momentum: float, slot: str):
    if momentum == 0.0:
        state.params.apply(grad, lr)
        return
    v = state.velocity.get(slot)
    v = grad if v is None else GradientRecord().add_(v, momentum).add_(grad)
    state.velocity[slot] = v
    state.params.apply(v, lr)


def _estep_due(state: TrainState, cfg: TrainConfig, b: int) -> bool:
    F = cfg.estep_frequency
    if cfg.estep_frequency_unit == "rollout-batches":
        return b % F == 0
    before = state.mstep_updates
    return (before // F) != ((before + cfg.mstep_steps) // F)


def _token_advantages(groups, state, cfg, mode, b):
    trajs, advs = [], []
    teacher = state.teacher_snapshot
    deltas_all = []
    for x, group in groups:
        a = grpo_advantages([t.reward for t in group], group[0].group_id).advantages
        for traj, ai in zip(group, a):
            fb = traj.feedback
            d = (sdpo_token_advantage(traj, fb, state.params, teacher) if fb.active
                 else np.zeros(len(traj.response)))
            trajs.append(traj)
            advs.append(float(ai))
            deltas_all.append(d)
    if mode == "hybrid-reshape" and cfg.hybrid.standardize_sdpo:
        flat = np.concatenate(deltas_all)
        mu, sd = flat.mean(), flat.std()
        deltas_all = [(d - mu) / (sd + 1e-6) for d in deltas_all]
    token_advs = []
    alpha = cfg.hybrid.alpha(state.mstep_updates)
    for a, d in zip(advs, deltas_all):
        if mode == "hybrid-reshape":
            token_advs.append(reshape_advantage(a, d, cfg.hybrid))
        else:
            token_advs.append(np.array([reweight_advantage(a, dt, alpha, cfg.hybrid.reweight_clip)
                                        for dt in d]))
    return trajs, token_advs, alpha


def run_batch(state: TrainState, cfg: TrainConfig) -> dict:
    """One rollout batch: rollout, critique, optional E-step, update, metrics."""
    b = state.batch_index + 1
    env = cfg.env
    groups = collect_rollouts(state, cfg, b)
    trajs = [t for _, g in groups for t in g]
    dcfg = distill_config(cfg)
    rec = {
        "batch": b,
        "method": cfg.method,
        "train_accuracy": float(np.mean([t.reward for t in trajs])),
        "eval_accuracy": None,
        "reward_margin": None,
        "distill_loss": None,
        "estep_loss": None,
        "delta": None,
        "estep_ran": False,
        "alpha": None,
        "exact_j": None,
        "elbo": None,
        "importance_drift": None,
        "skipped": {},
    }
    feedback_none = sum(1 for t in trajs if not t.feedback.active)
    state.counters["feedback_none"] += feedback_none
    skipped = {"feedback_none": feedback_none}
    items = [(t, t.feedback) for t in trajs]

    # Margin is measured before any update so all methods see the same snapshot semantics.
    if cfg.method in ("vpd", "sdpo"):
        teacher = state.params if cfg.method == "vpd" else state.teacher_snapshot
        frozen = freeze_student_logprobs(state.params, trajs)
        mb = EStepBatch.build(estep_items(groups, cfg), frozen)
        if teacher is state.params:
            rec["reward_margin"] = reward_margin(mb, teacher, cfg.beta)
        else:
            rec["reward_margin"] = _margin_with_teacher(mb, state.params, teacher, cfg.beta)

    if cfg.method == "vpd":
        if _estep_due(state, cfg, b):
            prior = state.params if cfg.prior_mode == "dynamic-student" else state.ref
            frozen = freeze_student_logprobs(prior, trajs)
            eb = EStepBatch.build(estep_items(groups, cfg), frozen)
            try:
                info = estep_update(state.params, eb, state.estep, cfg.estep_lr, cfg.estep_steps)
            except DegenerateEStepBatch:
                state.counters["degenerate_estep"] += 1
                skipped["degenerate_estep"] = 1
            else:
                state.counters["estep_runs"] += 1
                rec.update(estep_ran=True, estep_loss=info["loss"], delta=info["delta"])
        losses = []
        for _ in range(cfg.mstep_steps):
            loss, grad, n = batch_distill(state.params, items, dcfg)
            if n:
                descend(state, grad, cfg.mstep_lr, cfg.momentum, "m")
            losses.append(loss)
            state.mstep_updates += 1
        rec["distill_loss"] = losses[0] if any(t.feedback.active for t in trajs) else None

    elif cfg.method == "sdpo":
        for _ in range(cfg.mstep_steps):
            loss, grad = sdpo_loss(items, state.params, state.teacher_snapshot, dcfg)
            descend(state, grad, cfg.mstep_lr, cfg.momentum, "m")
            state.mstep_updates += 1
        rec["distill_loss"] = loss
        state.teacher_snapshot = ema_update(state.teacher_snapshot, state.params, cfg.sdpo_teacher_rate)

    elif cfg.method == "grpo":
        advs = []
        for _, group in groups:
            advs.extend(grpo_advantages([t.reward for t in group]).advantages)
        zero = True
        for _ in range(cfg.mstep_steps):
            _, grad = clipped_surrogate(state.params, trajs, advs, cfg.hybrid.ppo_clip)
            zero = zero and grad.max_abs() == 0.0
            descend(state, grad, cfg.mstep_lr, cfg.momentum, "m")
            state.mstep_updates += 1
        if zero:
            state.counters["zero_gradient_batches"] += 1
            skipped["zero_gradient"] = 1

    elif cfg.method == "hybrid-joint":
        advs = []
        for _, group in groups:
            advs.extend(grpo_advantages([t.reward for t in group]).advantages)
        for _ in range(cfg.mstep_steps):
            loss, grad = hybrid_joint_loss(trajs, items, state.params, advs, cfg.hybrid, dcfg,
                                           state.teacher_snapshot)
            descend(state, grad, cfg.mstep_lr, cfg.momentum, "m")
            state.mstep_updates += 1
        rec["distill_loss"] = loss
        state.teacher_snapshot = ema_update(state.teacher_snapshot, state.params, cfg.sdpo_teacher_rate)

    else:  # hybrid-reshape / hybrid-reweight
        tr, token_advs, alpha = _token_advantages(groups, state, cfg, cfg.method, b)
        for _ in range(cfg.mstep_steps):
            _, grad = clipped_surrogate(state.params, tr, token_advs, cfg.hybrid.ppo_clip)
            descend(state, grad, cfg.mstep_lr, cfg.momentum, "m")
            state.mstep_updates += 1
        if cfg.method == "hybrid-reweight":
            rec["alpha"] = alpha
        state.teacher_snapshot = ema_update(state.teacher_snapshot, state.params, cfg.sdpo_teacher_rate)

    drift = [float(np.mean(np.log(importance_ratio(t, state.params)))) for t in trajs]
    rec["importance_drift"] = float(np.mean(drift))

    if b % cfg.eval_every == 0 or b == cfg.total_batches:
        prompts = eval_prompt_set(cfg)
        rec["eval_accuracy"] = evaluate(state.params, env, prompts, cfg.eval_decode,
                                        cfg.eval_trials, stream(cfg.seed, _EVAL, b))
        if cfg.oracle_checks:
            rec["exact_j"], rec["elbo"] = _oracle_metrics(state, cfg, prompts)

    rec["skipped"] = skipped
    state.batch_index = b
    return rec


def _margin_with_teacher(batch: EStepBatch, student, teacher, beta):
    if batch.degenerate:
        return None
    fz = batch.frozen_student_logprobs
    pos = [implicit_reward(teacher, t, fb, fz[t.key], beta) for t, fb in batch.positives]
    neg = [implicit_reward(teacher, t, fb, fz[t.key], beta) for t, fb in batch.negatives]
    return float(np.mean(pos) - np.mean(neg))


def _oracle_metrics(state: TrainState, cfg: TrainConfig, prompts):
    env = cfg.env
    js, fs = [], []
    for x in prompts:
        ctx = Context(tuple(x))
        pi = oracle.enumerate_dist(state.params, ctx, env, cfg.oracle_cap)
        ref = oracle.enumerate_dist(state.ref, ctx, env, cfg.oracle_cap)
        js.append(oracle.exact_objective(pi, ref, env, x, cfg.beta))
        y = greedy_decode(state.params, ctx, env.response_len)
        probe = Trajectory(tuple(x), y, (), 0.0, verify(env, x, y).reward)
        fb = make_feedback(env, cfg.feedback_mode, x, probe, [probe])
        if fb.active:
            q = oracle.enumerate_dist(state.params, ctx.with_feedback(fb.tokens), env, cfg.oracle_cap)
            fs.append(oracle.elbo(q, ref, env, x, cfg.beta))
    return float(np.mean(js)), (float(np.mean(fs)) if fs else None)


# --- checkpoints --------------------------------------------------------------------------

def save_checkpoint(state: TrainState, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "params.bin").write_bytes(dumps_params(state.params))
    (d / "ref.bin").write_bytes(dumps_params(state.ref))
    if state.teacher_snapshot is not None:
        (d / "teacher.bin").write_bytes(dumps_params(state.teacher_snapshot))
    for slot, v in state.velocity.items():
        vp = PolicyParams(state.params.vocab, state.params.kind, state.params.max_len,
                          dict(v.table), v.weights, state.params.feature_spec)
        (d / f"velocity_{slot}.bin").write_bytes(dumps_params(vp))
    meta = {
        "batch_index": state.batch_index,
        "mstep_updates": state.mstep_updates,
        "delta": state.estep.delta.hex(),
        "counters": state.counters,
        "velocity_slots": sorted(state.velocity),
    }
    (d / "state.json").write_text(json.dumps(meta, sort_keys=True))


def load_checkpoint(cfg: TrainConfig, directory) -> TrainState:
    d = Path(directory)
    meta = json.loads((d / "state.json").read_text())
    state = init_state(cfg)
    state.params = loads_params((d / "params.bin").read_bytes())
    state.ref = loads_params((d / "ref.bin").read_bytes())
    if (d / "teacher.bin").exists():
        state.teacher_snapshot = loads_params((d / "teacher.bin").read_bytes())
    for slot in meta["velocity_slots"]:
        vp = loads_params((d / f"velocity_{slot}.bin").read_bytes())
        state.velocity[slot] = GradientRecord(vp.table, vp.weights if vp.kind != "tabular" else None)
    state.batch_index = meta["batch_index"]
    state.mstep_updates = meta["mstep_updates"]
    state.estep.delta = float.fromhex(meta["delta"])
    state.counters = meta["counters"]
    return state


def metrics_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def train(cfg: TrainConfig, state: TrainState | None = None, on_record=None,
          checkpoint_dir=None, stop_after: int | None = None):
    """Run batches until ``total_batches`` (or ``stop_after``); return (state, records)."""
    state = init_state(cfg) if state is None else state
    records = []
    end = cfg.total_batches if stop_after is None else min(stop_after, cfg.total_batches)
    while state.batch_index < end:
        rec = run_batch(state, cfg)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if checkpoint_dir and cfg.checkpoint_every and state.batch_index % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"batch_{state.batch_index:06d}")
    return state, records


# --- exact EM run -----------------------------------------------------------------------

def expected_distill_loss(params: PolicyParams, teacher_tables: dict, env, prompts, kind: str):
    """Exact on-policy token-level divergence and its (weights-frozen) gradient.

    Prefix weights are the student's own prefix probabilities, treated as
    constants exactly like sampling rollouts from the student.
    """
    k = kernels.DIVERGENCE_KINDS[kind]
    grad = GradientRecord()
    total = 0.0
    n = params.vocab.n_out
    for x in prompts:
        ctx = Context(tuple(x))
        frontier = [((), 0.0)]
        for _ in range(env.response_len):
            nxt = []
            for pre, lw in frontier:
                c = ctx.extend(pre)
                z = params.logits(c)
                q = np.exp(teacher_tables[(tuple(x), pre)])
                val, g = kernels.divergence_logit_grad(z, q, k)
                w = np.exp(lw) / len(prompts)
                total += w * val
                grad.add_key(params.key(c), g, w)
                lp = kernels.log_softmax(z)
                nxt.extend((pre + (tok,), lw + lp[tok]) for tok in range(n))
            frontier = nxt
    return total, grad


def em_monotonicity_run(env, beta: float, cycles: int, prompts=None, lr: float = 2.0,
                        tol: float = 1e-8, max_iters: int = 200000, reward_fn=None,
                        prior: str = "fixed-reference", divergence: str = "reverse-kl",
                        feedback=None):
    """Alternate an exact E-step with an M-step run to convergence.

    Returns the exact objective (mean over ``prompts``) before the first cycle
    and after each of ``cycles`` cycles, so the list has ``cycles + 1`` entries.
    ``prior='fixed-reference'`` tilts the initial reference each E-step;
    ``'dynamic-student'`` tilts the current student.
    """
    prompts = env.all_prompts() if prompts is None else [tuple(p) for p in prompts]
    rewards = env if reward_fn is None else reward_fn
    vocab = env.vocab
    feedback = (vocab.token("CRIT"),) if feedback is None else tuple(feedback)
    params = PolicyParams(vocab, "tabular", max_len=env.response_len)
    ref = params.copy()
    ref_dists = {x: oracle.enumerate_dist(ref, Context(x), env) for x in prompts}

    def objective():
        vals = [oracle.exact_objective(oracle.enumerate_dist(params, Context(x), env),
                                       ref_dists[x], rewards, x, beta) for x in prompts]
        return float(np.mean(vals))

    history = [objective()]
    for _ in range(cycles):
        teacher = {}
        for x in prompts:
            base = ref_dists[x] if prior == "fixed-reference" else oracle.enumerate_dist(params, Context(x), env)
            q = analytic_estep(base, rewards, x, beta, feedback, params)
            for pre, row in oracle.conditionals(q, vocab.n_out).items():
                teacher[(x, pre)] = row
        prev = None
        for _ in range(max_iters):
            loss, grad = expected_distill_loss(params, teacher, env, prompts, divergence)
            if prev is not None and abs(prev - loss) < tol:
                break
            params.apply(grad, lr)
            prev = loss
        history.append(objective())
    return history
