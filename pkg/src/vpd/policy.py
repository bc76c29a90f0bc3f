"""Autoregressive categorical policies over a small token alphabet.

One :class:`PolicyParams` store plays both roles of the method: evaluated on a
plain context it is the student, evaluated on a context carrying feedback
tokens it is the teacher.  There is no second copy of the weights.

The action alphabet is the ordinary tokens ``0..size-1`` plus EOS when enabled.
Reserved tokens (separators, feedback markers, position markers) only ever
appear in contexts, so every probability vector has length ``vocab.n_out``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigError

ROLES = ("EOS", "SEP", "FB_OPEN", "FB_CLOSE", "ERR", "SIB", "CRIT", "MASK", "HIGH", "LOW")
MAGIC = b"VPDPARM1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    size: int
    n_positions: int = 0
    eos: bool = False

    def __post_init__(self):
        if self.size < 2:
            raise ConfigError("vocab.size must be >= 2")
        if self.n_positions < 0:
            raise ConfigError("vocab.n_positions must be >= 0")

    def token(self, role: str) -> int:
        return self.size + ROLES.index(role)

    def position(self, k: int) -> int:
        if not 0 <= k < self.n_positions:
            raise ValueError(f"no position marker for {k}")
        return self.size + len(ROLES) + k

    @property
    def total(self) -> int:
        return self.size + len(ROLES) + self.n_positions

    @property
    def n_out(self) -> int:
        return self.size + (1 if self.eos else 0)

    def describe(self) -> dict:
        return {"size": self.size, "n_positions": self.n_positions, "eos": self.eos,
                "roles": list(ROLES)}


@dataclass(frozen=True)
class Context:
    prompt: tuple
    feedback: Optional[tuple] = None
    prefix: tuple = ()

    def __post_init__(self):
        if len(self.prompt) == 0:
            raise ValueError("prompt must be nonempty")

    def extend(self, tokens) -> "Context":
        return Context(self.prompt, self.feedback, self.prefix + tuple(tokens))

    def without_feedback(self) -> "Context":
        return Context(self.prompt, None, self.prefix)

    def with_feedback(self, tokens) -> "Context":
        return Context(self.prompt, tuple(tokens), self.prefix)

    def serialize(self, vocab: Vocabulary) -> tuple:
        head = ()
        if self.feedback is not None:
            head = (vocab.token("FB_OPEN"),) + tuple(self.feedback) + (vocab.token("FB_CLOSE"),)
        return head + tuple(self.prompt) + (vocab.token("SEP"),) + tuple(self.prefix)


@dataclass(frozen=True)
class FeatureSpec:
    """Last-two-token one-hots, position one-hot, feedback bag, bias."""

    n_tokens: int
    max_len: int

    @property
    def dim(self) -> int:
        return 2 * (self.n_tokens + 1) + (self.max_len + 1) + self.n_tokens + 1

    def features(self, ctx: Context, vocab: Vocabulary) -> np.ndarray:
        f = np.zeros(self.dim)
        seq = ctx.serialize(vocab)
        n1 = self.n_tokens + 1
        last = seq[-1] if len(seq) >= 1 else self.n_tokens
        prev = seq[-2] if len(seq) >= 2 else self.n_tokens
        f[last] = 1.0
        f[n1 + prev] = 1.0
        f[2 * n1 + min(len(ctx.prefix), self.max_len)] = 1.0
        base = 2 * n1 + self.max_len + 1
        for tok in ctx.feedback or ():
            f[base + tok] += 1.0
        f[-1] = 1.0
        return f


@dataclass
class PolicyParams:
    vocab: Vocabulary
    kind: str = "tabular"
    max_len: int = 8
    table: dict = field(default_factory=dict)
    weights: Optional[np.ndarray] = None
    feature_spec: Optional[FeatureSpec] = None

    def __post_init__(self):
        if self.kind not in ("tabular", "linear-softmax"):
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.kind == "linear-softmax":
            if self.feature_spec is None:
                self.feature_spec = FeatureSpec(self.vocab.total, self.max_len)
            if self.weights is None:
                self.weights = np.zeros((self.feature_spec.dim, self.vocab.n_out))
            if self.weights.shape != (self.feature_spec.dim, self.vocab.n_out):
                raise ConfigError(
                    f"linear weights shape {self.weights.shape} does not match "
                    f"features {self.feature_spec.dim} x outputs {self.vocab.n_out}"
                )

    @classmethod
    def random(cls, vocab, kind="tabular", max_len=8, rng=None, scale=1.0, contexts=()):
        """Random parameters; tabular entries are only drawn for ``contexts``."""
        rng = np.random.default_rng(rng)
        p = cls(vocab, kind, max_len)
        if kind == "linear-softmax":
            p.weights = rng.normal(scale=scale, size=p.weights.shape)
        else:
            for ctx in contexts:
                p.table[ctx.serialize(vocab)] = rng.normal(scale=scale, size=vocab.n_out)
        return p

    def key(self, ctx: Context) -> tuple:
        return ctx.serialize(self.vocab)

    def logits(self, ctx: Context) -> np.ndarray:
        if self.kind == "tabular":
            z = self.table.get(self.key(ctx))
            return np.zeros(self.vocab.n_out) if z is None else z
        f = self.feature_spec.features(ctx, self.vocab)
        if f.shape[0] != self.weights.shape[0]:
            raise ConfigError("feature vector does not match linear weights")
        return f @ self.weights

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.vocab, self.kind, self.max_len,
            {k: v.copy() for k, v in self.table.items()},
            None if self.weights is None else self.weights.copy(),
            self.feature_spec,
        )

    def apply(self, grad: "GradientRecord", lr: float) -> None:
        """In-place descent step ``params -= lr * grad``."""
        if self.kind == "tabular":
            n = self.vocab.n_out
            for k, g in grad.table.items():
                z = self.table.get(k)
                self.table[k] = (np.zeros(n) if z is None else z) - lr * g
        elif grad.weights is not None:
            self.weights = self.weights - lr * grad.weights

    def same_shape(self, other: "PolicyParams") -> bool:
        if self.kind != other.kind or self.vocab != other.vocab:
            return False
        if self.kind == "linear-softmax":
            return self.weights.shape == other.weights.shape
        return True

    def equals(self, other: "PolicyParams") -> bool:
        if not self.same_shape(other):
            return False
        if self.kind == "linear-softmax":
            return np.array_equal(self.weights, other.weights)
        keys = set(self.table) | set(other.table)
        zero = np.zeros(self.vocab.n_out)
        return all(np.array_equal(self.table.get(k, zero), other.table.get(k, zero)) for k in keys)


@dataclass
class GradientRecord:
    """Sparse gradient with the same layout as :class:`PolicyParams`.

    Keys absent from ``table`` (or ``weights is None``) are zero.
    """

    table: dict = field(default_factory=dict)
    weights: Optional[np.ndarray] = None

    def add_(self, other: "GradientRecord", scale: float = 1.0) -> "GradientRecord":
        for k, g in other.table.items():
            cur = self.table.get(k)
            self.table[k] = scale * g if cur is None else cur + scale * g
        if other.weights is not None:
            self.weights = scale * other.weights if self.weights is None else self.weights + scale * other.weights
        return self

    def add_key(self, key, g, scale=1.0):
        cur = self.table.get(key)
        self.table[key] = scale * g if cur is None else cur + scale * g

    def scaled(self, c: float) -> "GradientRecord":
        return GradientRecord({k: c * v for k, v in self.table.items()},
                              None if self.weights is None else c * self.weights)

    def __add__(self, other):
        return GradientRecord().add_(self).add_(other)

    def __sub__(self, other):
        return GradientRecord().add_(self).add_(other, -1.0)

    def __mul__(self, c):
        return self.scaled(c)

    __rmul__ = __mul__

    def get(self, key, n):
        g = self.table.get(key)
        return np.zeros(n) if g is None else g

    def max_abs(self) -> float:
        m = max((float(np.max(np.abs(v))) for v in self.table.values()), default=0.0)
        if self.weights is not None:
            m = max(m, float(np.max(np.abs(self.weights))))
        return m

    def flat(self, keys=None):
        """Concatenate entries in sorted-key order (weights last)."""
        keys = sorted(self.table) if keys is None else keys
        parts = [self.table[k] for k in keys if k in self.table]
        if self.weights is not None:
            parts.append(self.weights.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)


# --- operations -----------------------------------------------------------------

def next_token_dist(params: PolicyParams, ctx: Context) -> np.ndarray:
    return kernels.softmax(params.logits(ctx))


def next_token_logprobs(params: PolicyParams, ctx: Context) -> np.ndarray:
    return kernels.log_softmax(params.logits(ctx))


def token_logprobs(params: PolicyParams, ctx: Context, y) -> np.ndarray:
    out = np.empty(len(y))
    for t, tok in enumerate(y):
        out[t] = next_token_logprobs(params, ctx.extend(y[:t]))[tok]
    return out


def sequence_logprob(params: PolicyParams, ctx: Context, y) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.sum(token_logprobs(params, ctx, y)))


def _logit_grad_into(grad: GradientRecord, params: PolicyParams, ctx: Context, g_logits, scale=1.0):
    """Accumulate ``scale * d(loss)/d(params)`` given ``d(loss)/d(logits at ctx)``."""
    if params.kind == "tabular":
        grad.add_key(params.key(ctx), g_logits, scale)
    else:
        f = params.feature_spec.features(ctx, params.vocab)
        outer = np.outer(f, g_logits) * scale
        grad.weights = outer if grad.weights is None else grad.weights + outer


def logprob_grad(params: PolicyParams, ctx: Context, y) -> GradientRecord:
    """Gradient of ``sequence_logprob`` w.r.t. the parameters."""
    grad = GradientRecord()
    for t, tok in enumerate(y):
        c = ctx.extend(y[:t])
        g = -next_token_dist(params, c)
        g[tok] += 1.0
        _logit_grad_into(grad, params, c, g)
    return grad


@dataclass
class Trajectory:
    prompt: tuple
    response: tuple
    token_logprobs: tuple
    total_logprob: float
    reward: int = 0
    feedback: Optional[object] = None
    group_id: int = 0
    rollout_index: int = 0

    @property
    def key(self):
        return (self.group_id, self.rollout_index)


def sample_trajectory(params: PolicyParams, ctx: Context, rng, max_len: int,
                      group_id: int = 0, rollout_index: int = 0) -> Trajectory:
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    rng = np.random.default_rng(rng)
    eos = params.vocab.token("EOS") if params.vocab.eos else None
    ys, lps = [], []
    for _ in range(max_len):
        lp = next_token_logprobs(params, ctx.extend(ys))
        tok = kernels.sample_index(np.exp(lp), rng.random())
        ys.append(tok)
        lps.append(float(lp[tok]))
        if tok == eos:
            break
    return Trajectory(tuple(ctx.prompt), tuple(ys), tuple(lps), float(sum(lps)),
                      group_id=group_id, rollout_index=rollout_index)


def greedy_decode(params: PolicyParams, ctx: Context, max_len: int) -> tuple:
    eos = params.vocab.token("EOS") if params.vocab.eos else None
    ys = []
    for _ in range(max_len):
        tok = int(np.argmax(params.logits(ctx.extend(ys))))
        ys.append(tok)
        if tok == eos:
            break
    return tuple(ys)


def ema_update(target: PolicyParams, source: PolicyParams, rate: float) -> PolicyParams:
    """Return ``(1 - rate) * target + rate * source`` as a new store."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError("EMA rate must lie in [0, 1]")
    if not target.same_shape(source):
        raise ConfigError("EMA update between parameter stores of different shape")
    out = target.copy()
    if target.kind == "linear-softmax":
        out.weights = (1.0 - rate) * target.weights + rate * source.weights
        return out
    zero = np.zeros(target.vocab.n_out)
    for k in set(target.table) | set(source.table):
        out.table[k] = (1.0 - rate) * target.table.get(k, zero) + rate * source.table.get(k, zero)
    return out


# --- snapshot serialization ----------------------------------------------------------

def dumps_params(params: PolicyParams) -> bytes:
    """Binary snapshot: 8-byte magic, u32 header length, JSON header, raw float64 data."""
    keys = sorted(params.table) if params.kind == "tabular" else []
    header = {
        "version": FORMAT_VERSION,
        "kind": params.kind,
        "vocab": params.vocab.describe(),
        "max_len": params.max_len,
        "keys": [list(k) for k in keys],
        "n_out": params.vocab.n_out,
    }
    if params.kind == "linear-softmax":
        header["shape"] = list(params.weights.shape)
        header["feature_spec"] = {"n_tokens": params.feature_spec.n_tokens,
                                  "max_len": params.feature_spec.max_len}
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    if params.kind == "tabular":
        for k in keys:
            buf.write(np.asarray(params.table[k], dtype="<f8").tobytes())
    else:
        buf.write(np.ascontiguousarray(params.weights, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_params(data: bytes) -> PolicyParams:
    if data[:8] != MAGIC:
        raise ValueError("not a parameter snapshot (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    if header["version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported snapshot version {header['version']}")
    v = header["vocab"]
    if tuple(v["roles"]) != ROLES:
        raise ValueError("snapshot vocabulary roles do not match this build")
    vocab = Vocabulary(v["size"], v["n_positions"], v["eos"])
    body = np.frombuffer(data[12 + hlen:], dtype="<f8")
    if header["kind"] == "tabular":
        n = header["n_out"]
        table = {tuple(k): body[i * n:(i + 1) * n].astype(np.float64)
                 for i, k in enumerate(header["keys"])}
        return PolicyParams(vocab, "tabular", header["max_len"], table)
    fs = FeatureSpec(**header["feature_spec"])
    w = body.reshape(header["shape"]).astype(np.float64)
    return PolicyParams(vocab, "linear-softmax", header["max_len"], weights=w, feature_spec=fs)


def save_params(params: PolicyParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_params(params))


def load_params(path) -> PolicyParams:
    with open(path, "rb") as fh:
        return loads_params(fh.read())
