"""Shared builders for small hand-checkable batches."""
import math

from vpd.env import EnvSpec, FeedbackRecord
from vpd.estep import EStepBatch
from vpd.policy import PolicyParams, Trajectory

ENV = EnvSpec("keyed-copy", 4, 1, 1)


def fb(*extra):
    return FeedbackRecord("env-diagnostic", (ENV.vocab.token("ERR"),) + tuple(extra))


def make_batch(r_pos, r_neg, beta):
    """Uniform teacher plus frozen log-probs chosen so each implicit reward is exact."""
    params = PolicyParams(ENV.vocab, "tabular", max_len=1)
    lq = math.log(1.0 / ENV.vocab.n_out)
    items, frozen = [], {}
    for i, r in enumerate(list(r_pos) + list(r_neg)):
        reward = 1 if i < len(r_pos) else 0
        t = Trajectory((i % 4,), (0,), (lq,), lq, reward, None, i, 0)
        frozen[t.key] = lq - r / beta
        items.append((t, fb(i)))
    return params, EStepBatch.build(items, frozen)
