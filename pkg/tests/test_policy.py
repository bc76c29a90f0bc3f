import math

import numpy as np
import pytest

from vpd.checks import compare_grad
from vpd.errors import ConfigError
from vpd.policy import (Context, PolicyParams, Vocabulary, dumps_params, ema_update, greedy_decode,
                        load_params, loads_params, logprob_grad, next_token_dist, save_params,
                        sample_trajectory, sequence_logprob)


def test_fresh_params_are_uniform():
    v = Vocabulary(6)
    p = PolicyParams(v, "tabular", max_len=3)
    np.testing.assert_allclose(next_token_dist(p, Context((1, 2))), np.full(6, 1 / 6))


def test_two_outcome_softmax_values():
    v = Vocabulary(2)
    p = PolicyParams(v, "tabular", max_len=1)
    ctx = Context((0,))
    p.table[p.key(ctx)] = np.array([1.0, 1.0])
    np.testing.assert_allclose(next_token_dist(p, ctx), [0.5, 0.5])
    p.table[p.key(ctx)] = np.array([1.0, 0.0])
    np.testing.assert_allclose(next_token_dist(p, ctx), [0.7311, 0.2689], atol=1e-4)


def test_sequence_logprob_basics():
    p = PolicyParams(Vocabulary(8), "tabular", max_len=3)
    assert sequence_logprob(p, Context((0,)), ()) == 0.0
    assert sequence_logprob(p, Context((0,)), (1, 2, 3)) == pytest.approx(3 * math.log(1 / 8))
    assert sequence_logprob(p, Context((0,)), (1, 2, 3)) == pytest.approx(-6.2383, abs=1e-4)


@pytest.mark.parametrize("kind", ["tabular", "linear-softmax"])
def test_sequences_normalize(kind):
    v = Vocabulary(3)
    rng = np.random.default_rng(0)
    p = PolicyParams.random(v, kind, max_len=3, rng=rng)
    ctx = Context((1, 2))
    import itertools
    for y in itertools.product(range(3), repeat=3):
        for t in range(3):
            k = p.key(ctx.extend(y[:t]))
            if kind == "tabular" and k not in p.table:
                p.table[k] = rng.normal(size=3)
    total = sum(math.exp(sequence_logprob(p, ctx, y)) for y in itertools.product(range(3), repeat=3))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_logprob_grad_one_hot_minus_uniform():
    p = PolicyParams(Vocabulary(4), "tabular", max_len=1)
    ctx = Context((0,))
    g = logprob_grad(p, ctx, (2,))
    np.testing.assert_allclose(g.get(p.key(ctx), 4), [-0.25, -0.25, 0.75, -0.25])


@pytest.mark.parametrize("kind", ["tabular", "linear-softmax"])
def test_logprob_grad_matches_finite_differences(kind):
    v = Vocabulary(3, n_positions=3)
    rng = np.random.default_rng(1)
    p = PolicyParams.random(v, kind, max_len=3, rng=rng)
    ctx = Context((0, 2), feedback=(v.token("ERR"), 1))
    y = (2, 0, 1)
    for t in range(3):
        if kind == "tabular":
            p.table[p.key(ctx.extend(y[:t]))] = rng.normal(size=3)
    g = logprob_grad(p, ctx, y)
    if kind == "tabular":
        for k in g.table:
            assert abs(g.table[k].sum()) < 1e-12
    assert compare_grad(lambda q: sequence_logprob(q, ctx, y), p, g) <= 1e-6


def test_linear_feedback_and_student_share_weights():
    v = Vocabulary(3)
    p = PolicyParams.random(v, "linear-softmax", max_len=2, rng=0)
    student = Context((1,))
    teacher = student.with_feedback((v.token("CRIT"), 2))
    g = logprob_grad(p, teacher, (1,))
    before = next_token_dist(p, student)
    p.apply(g, 1.0)
    # One update on the feedback context moves the feedback-free distribution too.
    assert not np.allclose(before, next_token_dist(p, student))


def test_deterministic_policy_repeats_token():
    p = PolicyParams(Vocabulary(4), "tabular", max_len=3)
    ctx = Context((0,))
    for t in range(3):
        z = np.zeros(4)
        z[2] = 50.0
        p.table[p.key(ctx.extend((2,) * t))] = z
    assert sample_trajectory(p, ctx, 0, 3).response == (2, 2, 2)
    assert greedy_decode(p, ctx, 3) == (2, 2, 2)


def test_sampling_is_deterministic_per_seed():
    p = PolicyParams.random(Vocabulary(5), "linear-softmax", max_len=4, rng=3)
    a = sample_trajectory(p, Context((1, 2)), 11, 4)
    b = sample_trajectory(p, Context((1, 2)), 11, 4)
    assert a == b


def test_sampling_matches_distribution():
    v = Vocabulary(4)
    p = PolicyParams(v, "tabular", max_len=1)
    ctx = Context((0,))
    p.table[p.key(ctx)] = np.array([0.5, -1.0, 1.0, 0.0])
    probs = next_token_dist(p, ctx)
    rng = np.random.default_rng(5)
    n = 100_000
    counts = np.zeros(4)
    for _ in range(n):
        counts[sample_trajectory(p, ctx, rng, 1).response[0]] += 1
    se = np.sqrt(probs * (1 - probs) / n)
    assert np.all(np.abs(counts / n - probs) <= 3 * se)


def test_ema_update():
    v = Vocabulary(2)
    t = PolicyParams(v, "tabular", max_len=1)
    s = PolicyParams(v, "tabular", max_len=1)
    s.table[(0,)] = np.full(2, 10.0)
    assert ema_update(t, s, 0.0).table[(0,)].tolist() == [0.0, 0.0]
    assert ema_update(t, s, 1.0).equals(s)
    assert ema_update(t, s, 0.05).table[(0,)] == pytest.approx([0.5, 0.5])
    twice = ema_update(ema_update(t, s, 0.05), s, 0.05)
    assert twice.table[(0,)] == pytest.approx([0.975, 0.975])
    with pytest.raises(ConfigError):
        ema_update(t, s, 1.5)


@pytest.mark.parametrize("kind", ["tabular", "linear-softmax"])
def test_snapshot_round_trip(kind, tmp_path):
    v = Vocabulary(4, n_positions=2, eos=True)
    p = PolicyParams.random(v, kind, max_len=2, rng=9,
                            contexts=[Context((1,)), Context((2,), feedback=(3,))])
    q = loads_params(dumps_params(p))
    assert q.equals(p)
    save_params(p, tmp_path / "p.bin")
    assert load_params(tmp_path / "p.bin").equals(p)
    assert dumps_params(q) == dumps_params(p)


def test_snapshot_rejects_garbage():
    with pytest.raises(ValueError):
        loads_params(b"not a snapshot")
