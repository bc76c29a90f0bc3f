import math

import numpy as np
import pytest

from helpers import ENV, fb
from vpd.baselines import (HybridConfig, clipped_surrogate, grpo_advantages, grpo_loss,
                           hybrid_joint_loss, reshape_advantage, reweight_advantage, sdpo_loss,
                           sdpo_token_advantage)
from vpd.checks import _Instances
from vpd.env import EnvSpec
from vpd.errors import ConfigError
from vpd.mstep import DistillConfig, distill_loss
from vpd.policy import Context, PolicyParams, Trajectory, ema_update


def test_grpo_advantages():
    assert grpo_advantages([1, 1, 1, 1]).advantages.tolist() == [0, 0, 0, 0]
    assert grpo_advantages([0, 0, 0, 0]).advantages.tolist() == [0, 0, 0, 0]
    a = grpo_advantages([1, 1, 0, 0]).advantages
    np.testing.assert_allclose(a, np.array([1, 1, -1, -1]) * 0.5 / (0.5 + 1e-6), atol=1e-12)
    with pytest.raises(ConfigError):
        grpo_advantages([1])


def _group(seed=0, n=4):
    env = EnvSpec("keyed-copy", 4, 2, 2, 3)
    gen = _Instances(env, seed)
    p = gen.params()
    trajs = [gen.trajectory(p, 0, i) for i in range(n)]
    items = []
    for t in trajs:
        f = gen.feedback()
        gen.fill(p, Context(t.prompt, f.tokens), t.response)
        t.feedback = f
        items.append((t, f))
    return p, trajs, items


def test_grpo_loss_at_old_params_is_mean_advantage():
    p, trajs, _ = _group()
    adv = np.array([0.5, -1.0, 2.0, 0.25])
    loss, _ = grpo_loss(trajs, p, p, adv, 0.2)
    assert -loss == pytest.approx(adv.mean())
    loss, grad = grpo_loss(trajs, p, p, np.zeros(4), 0.2)
    assert loss == 0.0 and grad.max_abs() == 0.0


def test_all_uniform_groups_give_exactly_zero_gradient():
    p, trajs, _ = _group()
    adv = grpo_advantages([0, 0, 0, 0]).advantages
    _, grad = clipped_surrogate(p, trajs, adv, 0.2)
    assert grad.max_abs() == 0.0


def test_clip_blocks_gradient_outside_band():
    p, trajs, _ = _group(n=1)
    t = trajs[0]
    old = [np.asarray(t.token_logprobs) - 1.0]  # ratio e > 1 + clip
    _, grad = clipped_surrogate(p, trajs, [1.0], 0.2, old)
    assert grad.max_abs() == 0.0
    _, grad = clipped_surrogate(p, trajs, [-1.0], 0.2, old)
    assert grad.max_abs() > 0.0


def test_sdpo_matches_live_teacher_when_snapshot_is_live():
    p, trajs, items = _group()
    cfg = DistillConfig()
    loss, _ = sdpo_loss(items, p, p.copy(), cfg)
    live = np.mean([distill_loss(p, t, f, cfg)[0] for t, f in items])
    assert loss == pytest.approx(live, abs=1e-14)


def test_sdpo_snapshot_rates():
    v = ENV.vocab
    init = PolicyParams(v, "tabular", max_len=1)
    live = PolicyParams(v, "tabular", max_len=1)
    live.table[(0,)] = np.full(v.n_out, 10.0)
    snap = init.copy()
    for _ in range(5):
        snap = ema_update(snap, live, 0.0)
    assert snap.equals(init)
    snap = ema_update(ema_update(init, live, 0.05), live, 0.05)
    np.testing.assert_allclose(snap.table[(0,)], 0.975)


def test_sdpo_token_advantage_values():
    p = PolicyParams(ENV.vocab, "tabular", max_len=1)
    t = Trajectory((1,), (0,), (0.0,), 0.0)
    assert sdpo_token_advantage(t, fb(), p).tolist() == [0.0]
    n = ENV.vocab.n_out
    student = np.full(n, math.log(0.6 / (n - 1)))
    student[0] = math.log(0.4)
    teacher = np.full(n, math.log(0.2 / (n - 1)))
    teacher[0] = math.log(0.8)
    p.table[p.key(Context((1,)))] = student
    p.table[p.key(Context((1,), fb().tokens))] = teacher
    assert sdpo_token_advantage(t, fb(), p)[0] == pytest.approx(math.log(2), abs=1e-12)


def test_joint_loss_degenerate_weights_and_linearity():
    p, trajs, items = _group()
    adv = grpo_advantages([1, 0, 0, 1]).advantages
    cfg = DistillConfig()
    teacher = p.copy()
    s = sdpo_loss(items, p, teacher, cfg)
    g = grpo_loss(trajs, p, None, adv, 0.2)
    only_sdpo = hybrid_joint_loss(trajs, items, p, adv, HybridConfig(omega_rl=0.0, omega_opd=1.0), cfg, teacher)
    only_grpo = hybrid_joint_loss(trajs, items, p, adv, HybridConfig(omega_rl=1.0, omega_opd=0.0), cfg, teacher)
    assert only_sdpo[0] == s[0] and only_grpo[0] == g[0]
    h1 = hybrid_joint_loss(trajs, items, p, adv, HybridConfig(0.3, 0.4), cfg, teacher)
    h2 = hybrid_joint_loss(trajs, items, p, adv, HybridConfig(0.6, 0.8), cfg, teacher)
    assert h2[0] == pytest.approx(2 * h1[0], abs=1e-14)
    want = s[1].scaled(0.4) + g[1].scaled(0.3)
    for k in set(want.table) | set(h1[1].table):
        np.testing.assert_allclose(h1[1].get(k, 6), want.get(k, 6), atol=1e-12)


def test_reshape_advantage():
    assert reshape_advantage(0.7, 0.5, HybridConfig(omega_rl=1.0, omega_opd=0.0)) == 0.7
    assert reshape_advantage(1.0, 0.5, HybridConfig(omega_rl=1.0, omega_opd=1.0)) == 1.5
    assert reshape_advantage(0.0, 0.3, HybridConfig()) != 0.0


def test_reweight_advantage_examples():
    assert reweight_advantage(-0.8, 0.9, 0.0, 0.2) == -0.8
    assert reweight_advantage(-1.0, -0.3, 1.0, 0.2) == pytest.approx(-1.2, abs=1e-9)
    assert reweight_advantage(1.0, 5.0, 1.0, 0.2) == pytest.approx(1.2, abs=1e-9)
    assert reweight_advantage(0.0, 5.0, 1.0, 0.2) == 0.0
    with pytest.raises(ConfigError):
        reweight_advantage(1.0, 0.0, 1.0, 1.0)


def test_reweight_sign_coherence():
    deltas = np.linspace(-2, 2, 81)
    for a in (0.7, -0.7):
        for alpha in (0.0, 0.4, 1.0):
            vals = np.array([reweight_advantage(a, d, alpha, 0.2) for d in deltas])
            # Credit grows and the penalty shrinks as the teacher favours the token.
            assert np.all(np.diff(vals) >= -1e-15)
            mags = np.abs(vals)
            assert np.all(np.diff(mags) >= -1e-15) if a > 0 else np.all(np.diff(mags) <= 1e-15)
            assert np.all(np.abs(vals) <= abs(a) * (1 + alpha * 0.2) + 1e-15)


def test_alpha_schedule():
    h = HybridConfig(alpha_start=0.8, total_steps_for_decay=10)
    assert h.alpha(0) == 0.8 and h.alpha(5) == pytest.approx(0.4)
    assert h.alpha(10) == 0.0 and h.alpha(50) == 0.0
    assert HybridConfig(alpha_schedule="constant", alpha_start=0.3).alpha(99) == 0.3
    # once alpha is 0 the reweighted advantage is the plain GRPO one
    assert reweight_advantage(0.9, 1.5, h.alpha(10), 0.2) == 0.9


def test_hybrid_config_validation():
    for kw in ({"ppo_clip": 0.0}, {"reweight_clip": 1.0}, {"alpha_start": 1.5},
               {"alpha_schedule": "cosine"}, {"total_steps_for_decay": 0}):
        with pytest.raises(ConfigError):
            HybridConfig(**kw)
