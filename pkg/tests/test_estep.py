import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ENV, fb, make_batch
from vpd import oracle
from vpd.checks import bco_bound_check
from vpd.errors import PreconditionError
from vpd.estep import (DegenerateEStepBatch, EStepState, analytic_estep, bco_loss, class_rewards,
                       decoupled_bound, dpo_pair_loss, estep_update, implicit_reward, reward_shift)
from vpd.policy import Context, PolicyParams, Trajectory


def test_implicit_reward_examples():
    p = PolicyParams(ENV.vocab, "tabular", max_len=1)
    t = Trajectory((1,), (2,), (0.0,), 0.0, 0)
    lq = math.log(1 / ENV.vocab.n_out)
    assert implicit_reward(p, t, fb(), lq, 0.1) == 0.0
    ctx = Context((1,), fb().tokens)
    z = np.full(ENV.vocab.n_out, -50.0)
    z[2] = 0.0
    p.table[p.key(ctx)] = z
    lq2 = p.logits(ctx)[2] - np.log(np.exp(z).sum())
    assert implicit_reward(p, t, fb(), lq2 - 1.0, 0.1) == pytest.approx(0.1)
    assert implicit_reward(p, t, fb(), lq2 - 1.0, 0.2) == pytest.approx(0.2)
    with pytest.raises(PreconditionError):
        implicit_reward(p, t, fb(), float("nan"), 0.1)


def test_reward_shift_rules():
    p, b = make_batch([0.3, 0.5], [-0.1, -0.3], 0.1)
    s = EStepState(beta=0.1)
    assert reward_shift(b, p, s) == pytest.approx(0.1, abs=1e-9)
    p, b = make_batch([0.7, -0.2], [-0.7, 0.2], 0.1)
    assert reward_shift(b, p, EStepState(beta=0.1)) == pytest.approx(0.0, abs=1e-9)
    p, b = make_batch([0.4], [-0.2], 0.1)
    s = EStepState(beta=0.1, delta=0.0, delta_rule="ema", ema_rate=0.5)
    assert reward_shift(b, p, s) == pytest.approx(0.05, abs=1e-9)


def test_bco_loss_values():
    p, b = make_batch([0.2, 0.2], [0.2], 0.1)
    assert bco_loss(b, p, EStepState(beta=0.1, delta=0.2))[0] == pytest.approx(2 * math.log(2), abs=1e-12)
    p, b = make_batch([1.0], [-1.0], 0.1)
    assert bco_loss(b, p, EStepState(beta=0.1, delta=0.0))[0] == pytest.approx(0.62652, abs=1e-5)


def test_bco_shift_invariance_and_monotonicity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        rp, rn = rng.normal(size=3), rng.normal(size=2)
        d, c = rng.normal(), rng.normal()
        p, b = make_batch(rp, rn, 0.1)
        base = bco_loss(b, p, EStepState(beta=0.1, delta=d))[0]
        p2, b2 = make_batch(rp + c, rn + c, 0.1)
        assert bco_loss(b2, p2, EStepState(beta=0.1, delta=d + c))[0] == pytest.approx(base, abs=1e-12)
        p3, b3 = make_batch(rp + np.array([0.5, 0, 0]), rn - np.array([0.5, 0]), 0.1)
        assert bco_loss(b3, p3, EStepState(beta=0.1, delta=d))[0] <= base


def test_degenerate_batches_raise():
    p, b = make_batch([0.1, 0.2], [], 0.1)
    with pytest.raises(DegenerateEStepBatch):
        bco_loss(b, p, EStepState())
    with pytest.raises(DegenerateEStepBatch):
        estep_update(p, b, EStepState(), 1.0)


def test_dpo_pair_and_bound():
    assert dpo_pair_loss(0.3, 0.3) == pytest.approx(math.log(2))
    assert dpo_pair_loss(1.0, 0.0) == pytest.approx(0.31326, abs=1e-5)
    assert decoupled_bound(1.0, -1.0) == pytest.approx(0.62652, abs=1e-5)
    res = bco_bound_check(n=10_000)
    assert res.passed and res.n == 10_000


def test_estep_keeps_frozen_terms_and_raises_margin():
    p, b = make_batch([0.0, 0.0], [0.0, 0.0], 0.1)
    frozen = dict(b.frozen_student_logprobs)
    state = EStepState(beta=0.1)
    pos0, neg0 = class_rewards(b, p, 0.1)
    info = estep_update(p, b, state, lr=5.0, n_steps=3)
    assert b.frozen_student_logprobs == frozen
    pos1, neg1 = class_rewards(b, p, 0.1)
    assert pos1.mean() - neg1.mean() > pos0.mean() - neg0.mean()
    assert info["n_pos"] == 2 and info["n_neg"] == 2


def _two_outcome():
    seqs = [(0,), (1,)]
    return oracle.DistTable.from_probs(seqs, [0.5, 0.5]), lambda x, y: int(y[0] == 0)


def test_analytic_estep_examples():
    student, r = _two_outcome()
    q = analytic_estep(student, lambda x, y: 0, (0,), 1.0)
    np.testing.assert_allclose(q.probs, student.probs)
    q = analytic_estep(student, r, (0,), 1.0)
    np.testing.assert_allclose(q.probs, [0.73106, 0.26894], atol=1e-5)


def test_analytic_estep_is_optimal():
    env = ENV
    seqs = oracle.response_space(env.vocab.n_out, 1)
    rng = np.random.default_rng(1)
    student = oracle.random_dist(seqs, rng)
    x, beta = (2,), 0.3
    q = analytic_estep(student, env, x, beta)

    def obj(d):
        return oracle.expected_reward(d, env, x) - beta * oracle.exact_kl(d, student)

    best = obj(q)
    assert all(obj(oracle.random_dist(seqs, rng)) <= best for _ in range(1000))


def test_analytic_estep_writes_teacher_rows():
    env = ENV
    p = PolicyParams(env.vocab, "tabular", max_len=1)
    student = oracle.enumerate_dist(p, Context((2,)), env)
    feedback = fb().tokens
    q = analytic_estep(student, env, (2,), 0.5, feedback, p)
    written = oracle.enumerate_dist(p, Context((2,), feedback), env)
    np.testing.assert_allclose(written.probs, q.probs, atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.floats(-60, 60), st.floats(-60, 60))
def test_pair_loss_never_exceeds_decoupled_bound(rp, rn):
    assert dpo_pair_loss(rp, rn) <= decoupled_bound(rp, rn) + 1e-12
