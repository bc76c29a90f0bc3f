"""Toy verifiable environments and the three feedback sources.

``keyed-copy`` asks for the reversed prompt pushed through a per-position
permutation; ``mod-sum`` asks for the sum of the prompt tokens modulo the
vocabulary size.  Both have exactly one correct response per prompt.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, PreconditionError
from .policy import Trajectory, Vocabulary

FEEDBACK_MODES = ("env-diagnostic", "contrastive-sibling", "self-critique", "none")


@dataclass(frozen=True)
class OutcomeLabel:
    reward: int
    first_error_pos: Optional[int] = None
    expected_token: Optional[int] = None


@dataclass(frozen=True)
class FeedbackRecord:
    mode: str = "none"
    tokens: tuple = ()
    source_trajectory: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in FEEDBACK_MODES:
            raise ConfigError(f"unknown feedback mode {self.mode!r}")
        if (self.mode == "none") != (len(self.tokens) == 0):
            raise ValueError("feedback mode 'none' must carry no tokens and vice versa")

    @property
    def active(self) -> bool:
        return self.mode != "none"


NO_FEEDBACK = FeedbackRecord()


@dataclass(frozen=True)
class EnvSpec:
    family: str
    vocab_size: int
    prompt_len: int
    response_len: int
    transform_key: int = 0
    perms: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in ("keyed-copy", "mod-sum"):
            raise ConfigError(f"unknown env family {self.family!r}")
        if self.prompt_len < 1:
            raise ConfigError("env.prompt_len must be >= 1")
        if self.response_len < 1:
            raise ConfigError("env.response_len must be >= 1")
        if self.family == "keyed-copy" and self.response_len != self.prompt_len:
            raise ConfigError("keyed-copy requires response_len == prompt_len")
        if self.family == "mod-sum" and self.response_len != 1:
            raise ConfigError("mod-sum requires response_len == 1")
        # transform_key 0 is the identity permutation at every position.
        if self.transform_key == 0:
            perms = tuple(tuple(range(self.vocab_size)) for _ in range(self.response_len))
        else:
            rng = np.random.default_rng(self.transform_key)
            perms = tuple(tuple(int(v) for v in rng.permutation(self.vocab_size))
                          for _ in range(self.response_len))
        object.__setattr__(self, "perms", perms)

    @functools.cached_property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.vocab_size, n_positions=self.response_len)

    def all_prompts(self):
        return [tuple(p) for p in itertools.product(range(self.vocab_size), repeat=self.prompt_len)]

    def reward(self, x, y) -> int:
        return verify(self, x, y).reward


def sample_prompt(env: EnvSpec, rng) -> tuple:
    rng = np.random.default_rng(rng)
    return tuple(int(t) for t in rng.integers(0, env.vocab_size, size=env.prompt_len))


def target(env: EnvSpec, x) -> tuple:
    if len(x) != env.prompt_len:
        raise PreconditionError(f"prompt length {len(x)} != {env.prompt_len}")
    if env.family == "mod-sum":
        return (int(sum(x)) % env.vocab_size,)
    rev = tuple(reversed(x))
    return tuple(env.perms[t][rev[t]] for t in range(env.response_len))


def verify(env: EnvSpec, x, y) -> OutcomeLabel:
    if len(y) != env.response_len:
        raise PreconditionError(f"response length {len(y)} != {env.response_len}")
    want = target(env, x)
    for t, (a, b) in enumerate(zip(y, want)):
        if a != b:
            return OutcomeLabel(0, t, b)
    return OutcomeLabel(1)


def make_feedback(env: EnvSpec, mode: str, x, trajectory: Trajectory, group) -> FeedbackRecord:
    """Build the diagnostic record C for one trajectory of a rollout group."""
    vocab = env.vocab
    if mode == "none":
        return NO_FEEDBACK
    if mode == "env-diagnostic":
        label = verify(env, x, trajectory.response)
        if label.reward == 1:
            return FeedbackRecord(mode, (vocab.token("ERR"),))
        toks = [vocab.token("ERR"), vocab.position(label.first_error_pos), label.expected_token]
        if env.family == "mod-sum":
            diff = (trajectory.response[0] - label.expected_token) % env.vocab_size
            toks.append(vocab.token("HIGH") if diff <= env.vocab_size // 2 else vocab.token("LOW"))
        return FeedbackRecord(mode, tuple(toks))
    if mode == "contrastive-sibling":
        for sib in sorted(group, key=lambda t: t.rollout_index):
            if sib is trajectory or sib.rollout_index == trajectory.rollout_index:
                continue
            if verify(env, x, sib.response).reward == 1:
                return FeedbackRecord(mode, (vocab.token("SIB"),) + tuple(sib.response),
                                      source_trajectory=sib.key)
        return NO_FEEDBACK
    if mode == "self-critique":
        want = target(env, x)
        mask = vocab.token("MASK")
        toks = tuple(mask if a == b else b for a, b in zip(trajectory.response, want))
        return FeedbackRecord(mode, (vocab.token("CRIT"),) + toks)
    raise ConfigError(f"unknown feedback mode {mode!r}")
