"""Exact enumeration over every response of a fixed-length environment.

All quantities the training loop can only estimate (the partition function,
the reward-tilted optimum, exact KLs and objectives) are computed here in
closed form by summing over the full response space.  Nothing is sampled; if
the space is larger than the cap the oracle refuses rather than truncating.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, EnumerationCapExceeded
from .policy import Context, PolicyParams

DEFAULT_CAP = 10 ** 6


@dataclass
class DistTable:
    """A distribution over full responses, stored as log-probabilities.

    ``seqs`` is always in lexicographic (itertools.product) order so two tables
    built for the same environment line up index by index.
    """

    seqs: list
    logp: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)

    def __len__(self):
        return len(self.seqs)

    def as_dict(self) -> dict:
        return dict(zip(self.seqs, self.probs))

    def prob(self, y) -> float:
        return float(np.exp(self.logp[self.seqs.index(tuple(y))]))

    @classmethod
    def from_logits(cls, seqs, z):
        return cls(list(seqs), kernels.log_softmax(np.asarray(z, dtype=np.float64)))

    @classmethod
    def from_probs(cls, seqs, p):
        p = np.asarray(p, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(list(seqs), np.log(p / p.sum()))


def response_space(n_out: int, length: int, cap: int = DEFAULT_CAP) -> list:
    if n_out ** length > cap:
        raise EnumerationCapExceeded(
            f"enumeration needs {n_out}^{length} = {n_out ** length} sequences, cap is {cap}"
        )
    return [tuple(s) for s in itertools.product(range(n_out), repeat=length)]


def enumerate_dist(params: PolicyParams, ctx: Context, env, cap: int = DEFAULT_CAP) -> DistTable:
    """Exact sequence distribution of ``params`` at ``ctx`` over all responses."""
    n, T = params.vocab.n_out, env.response_len
    if n ** T > cap:
        raise EnumerationCapExceeded(
            f"enumeration needs {n}^{T} = {n ** T} sequences, cap is {cap}"
        )
    prefixes, logp = [()], np.zeros(1)
    for _ in range(T):
        new_pre, new_lp = [], []
        for pre, lp in zip(prefixes, logp):
            step = kernels.log_softmax(params.logits(ctx.extend(pre)))
            for tok in range(n):
                new_pre.append(pre + (tok,))
                new_lp.append(lp + step[tok])
        prefixes, logp = new_pre, np.array(new_lp)
    return DistTable(prefixes, logp)


def reward_vector(env, x, seqs) -> np.ndarray:
    """Rewards of every sequence; ``env`` is an EnvSpec or a callable ``r(x, y)``."""
    fn = env if callable(env) else env.reward
    return np.array([float(fn(x, y)) for y in seqs])


def _check_beta(beta):
    if not beta > 0:
        raise ConfigError(f"beta must be > 0, got {beta}")


def _tilted(ref_dist: DistTable, env, x, beta):
    _check_beta(beta)
    return ref_dist.logp + reward_vector(env, x, ref_dist.seqs) / beta


def partition_function(ref_dist: DistTable, env, x, beta: float) -> float:
    """log Z(x) = log sum_y ref(y) exp(r(x, y) / beta)."""
    return kernels.logsumexp(_tilted(ref_dist, env, x, beta))


def optimal_policy(ref_dist: DistTable, env, x, beta: float) -> DistTable:
    a = _tilted(ref_dist, env, x, beta)
    return DistTable(list(ref_dist.seqs), a - kernels.logsumexp(a))


def _same_support(p: DistTable, q: DistTable):
    if p.seqs != q.seqs:
        raise ValueError("distribution tables are over different supports")


def exact_kl(p: DistTable, q: DistTable) -> float:
    _same_support(p, q)
    pp = p.probs
    mask = pp > 0
    if np.any(np.isneginf(q.logp[mask])):
        raise ValueError("KL undefined: q has zero mass where p is positive")
    return float(np.sum(pp[mask] * (p.logp[mask] - q.logp[mask])))


def expected_reward(dist: DistTable, env, x) -> float:
    return float(np.sum(dist.probs * reward_vector(env, x, dist.seqs)))


def exact_objective(policy_dist: DistTable, ref_dist: DistTable, env, x, beta: float) -> float:
    """J = E_policy[r] - beta * KL(policy || ref)."""
    _same_support(policy_dist, ref_dist)
    return expected_reward(policy_dist, env, x) - beta * exact_kl(policy_dist, ref_dist)


def elbo(q_dist: DistTable, ref_dist: DistTable, env, x, beta: float) -> float:
    """F(q) = E_q[r] / beta - KL(q || ref)."""
    _check_beta(beta)
    return expected_reward(q_dist, env, x) / beta - exact_kl(q_dist, ref_dist)


@dataclass
class OracleReport:
    prompt: tuple
    beta: float
    log_partition: float
    optimal_dist: DistTable
    ref_dist: DistTable
    env: object

    def objective_of(self, dist: DistTable) -> float:
        return exact_objective(dist, self.ref_dist, self.env, self.prompt, self.beta)


def oracle_report(ref_params: PolicyParams, env, x, beta: float, cap: int = DEFAULT_CAP) -> OracleReport:
    ref = enumerate_dist(ref_params, Context(tuple(x)), env, cap)
    return OracleReport(tuple(x), beta, partition_function(ref, env, x, beta),
                        optimal_policy(ref, env, x, beta), ref, env)


def random_dist(seqs, rng) -> DistTable:
    """Softmax of i.i.d. standard normal logits: strictly positive everywhere."""
    rng = np.random.default_rng(rng)
    return DistTable.from_logits(seqs, rng.normal(size=len(seqs)))


def conditionals(dist: DistTable, n_out: int) -> dict:
    """Per-prefix next-token log-probabilities implied by a sequence distribution."""
    T = len(dist.seqs[0])
    out = {}
    mass = {}
    for y, lp in zip(dist.seqs, dist.logp):
        for t in range(T + 1):
            mass.setdefault(y[:t], []).append(lp)
    logmass = {k: kernels.logsumexp(np.array(v)) for k, v in mass.items()}
    for t in range(T):
        for pre in {y[:t] for y in dist.seqs}:
            out[pre] = np.array([logmass.get(pre + (tok,), -np.inf) for tok in range(n_out)]) - logmass[pre]
    return out
