import math

import numpy as np
import pytest

from vpd import oracle
from vpd.checks import identity_suite
from vpd.env import EnvSpec
from vpd.errors import EnumerationCapExceeded
from vpd.policy import Context, PolicyParams


def zero_reward(x, y):
    return 0


def first_token_reward(x, y):
    return int(y[0] == 0)


def uniform2():
    return oracle.DistTable.from_probs([(0,), (1,)], [0.5, 0.5])


def test_enumerate_uniform_and_normalized():
    env = EnvSpec("keyed-copy", 2, 2, 2)
    p = PolicyParams(env.vocab, "tabular", max_len=2)
    d = oracle.enumerate_dist(p, Context((0, 1)), env)
    np.testing.assert_allclose(d.probs, 0.25)
    rng = np.random.default_rng(0)
    for _ in range(100):
        q = PolicyParams.random(env.vocab, "linear-softmax", max_len=2, rng=rng, scale=3.0)
        assert oracle.enumerate_dist(q, Context((1, 1)), env).probs.sum() == pytest.approx(1.0, abs=1e-10)


def test_enumeration_cap():
    env = EnvSpec("keyed-copy", 10, 7, 7)
    p = PolicyParams(env.vocab, "tabular", max_len=7)
    with pytest.raises(EnumerationCapExceeded, match="cap"):
        oracle.enumerate_dist(p, Context((0,) * 7), env)


def test_partition_function_examples():
    ref = uniform2()
    assert oracle.partition_function(ref, zero_reward, (0,), 0.5) == 0.0
    logz = oracle.partition_function(ref, first_token_reward, (0,), 1.0)
    assert math.exp(logz) == pytest.approx(1.85914, abs=1e-5)
    assert logz == pytest.approx(0.62011, abs=1e-5)
    assert abs(oracle.partition_function(ref, first_token_reward, (0,), 1e6)) <= 1e-5


def test_optimal_policy_examples():
    ref = uniform2()
    assert np.array_equal(oracle.optimal_policy(ref, zero_reward, (0,), 0.3).probs, ref.probs)
    assert oracle.optimal_policy(ref, first_token_reward, (0,), 1.0).prob((0,)) == pytest.approx(0.73106, abs=1e-5)
    far = oracle.optimal_policy(ref, first_token_reward, (0,), 1e6)
    assert 0.5 * np.abs(far.probs - ref.probs).sum() <= 1e-6


def test_kl_examples():
    p = uniform2()
    q = oracle.DistTable.from_probs([(0,), (1,)], [0.75, 0.25])
    assert oracle.exact_kl(p, p) == 0.0
    assert oracle.exact_kl(p, q) == pytest.approx(0.14384, abs=1e-5)
    rng = np.random.default_rng(2)
    seqs = oracle.response_space(3, 2)
    for _ in range(1000):
        assert oracle.exact_kl(oracle.random_dist(seqs, rng), oracle.random_dist(seqs, rng)) >= 0.0


def test_objective_and_elbo_examples():
    ref = uniform2()
    assert oracle.exact_objective(ref, ref, zero_reward, (0,), 0.1) == 0.0
    assert oracle.exact_objective(ref, ref, first_token_reward, (0,), 0.1) == pytest.approx(0.5)
    assert oracle.elbo(ref, ref, zero_reward, (0,), 0.1) == 0.0
    pstar = oracle.optimal_policy(ref, first_token_reward, (0,), 0.7)
    assert oracle.elbo(pstar, ref, first_token_reward, (0,), 0.7) == pytest.approx(
        oracle.partition_function(ref, first_token_reward, (0,), 0.7), abs=1e-12)


def test_identity_suite_passes():
    results = identity_suite(EnvSpec("keyed-copy", 4, 3, 3, 7), 0.1)
    assert all(r.passed and r.max_residual <= 1e-9 for r in results)


@pytest.mark.parametrize("name", ["rlvr-reverse-kl-equivalence", "elbo-decomposition",
                                  "sliding-trust-region", "alignment-bonus-constancy"])
def test_corrupted_beta_is_caught(name):
    results = {r.name: r for r in identity_suite(EnvSpec("keyed-copy", 4, 3, 3, 7), 0.1, n=20, corrupt=name)}
    assert not results[name].passed
    assert all(r.passed for k, r in results.items() if k != name)


def test_conditionals_rebuild_the_joint():
    rng = np.random.default_rng(4)
    seqs = oracle.response_space(3, 2)
    d = oracle.random_dist(seqs, rng)
    cond = oracle.conditionals(d, 3)
    for s, lp in zip(d.seqs, d.logp):
        assert cond[()][s[0]] + cond[(s[0],)][s[1]] == pytest.approx(lp, abs=1e-12)
