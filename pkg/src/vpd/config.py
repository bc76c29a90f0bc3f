"""Experiment files: TOML documents with dotted keys, validated against a schema.

Unknown keys are errors.  Every default is materialised in the resolved
config so that echoing it back reproduces a run exactly.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .baselines import HybridConfig
from .env import FEEDBACK_MODES, EnvSpec
from .errors import ConfigError
from .estep import DELTA_RULES, PRIOR_MODES
from .mstep import DIVERGENCES

METHODS = ("grpo", "sdpo", "vpd", "hybrid-joint", "hybrid-reshape", "hybrid-reweight")
REQUIRED = object()

# dotted key -> (type, default)
SCHEMA = {
    "method": (str, REQUIRED),
    "beta": (float, REQUIRED),
    "seed": (int, 0),
    "env.family": (str, REQUIRED),
    "env.vocab_size": (int, REQUIRED),
    "env.prompt_len": (int, REQUIRED),
    "env.response_len": (int, REQUIRED),
    "env.transform_key": (int, 0),
    "policy.kind": (str, "tabular"),
    "init.wrong_bias": (float, 0.0),
    "rollouts_per_prompt": (int, 8),
    "prompts_per_batch": (int, 8),
    "total_batches": (int, 100),
    "estep_frequency": (int, 5),
    "estep_frequency_unit": (str, "rollout-batches"),
    "estep_lr": (float, 1.0),
    "estep_steps": (int, 1),
    "mstep_lr": (float, 1.0),
    "mstep_steps": (int, 1),
    "momentum": (float, 0.0),
    "feedback_mode": (str, "env-diagnostic"),
    "prior_mode": (str, "dynamic-student"),
    "divergence": (str, "reverse-kl"),
    "distill_reduction": (str, "mean"),
    "delta_rule": (str, "batch-mean"),
    "delta_ema_rate": (float, 0.1),
    "sdpo_teacher_rate": (float, 0.05),
    "hybrid.omega_rl": (float, 0.5),
    "hybrid.omega_opd": (float, 0.5),
    "hybrid.ppo_clip": (float, 0.2),
    "hybrid.reweight_clip": (float, 0.2),
    "hybrid.alpha_start": (float, 1.0),
    "hybrid.alpha_schedule": (str, "linear-decay-to-zero"),
    "hybrid.total_steps_for_decay": (int, 100),
    "hybrid.standardize_sdpo": (bool, False),
    "eval.every": (int, 10),
    "eval.prompts": (int, 64),
    "eval.decode": (str, "greedy"),
    "eval.trials": (int, 1),
    "oracle_checks": (bool, False),
    "oracle_cap": (int, 10 ** 6),
    "checkpoint_every": (int, 0),
}


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def nest(flat: dict) -> dict:
    out: dict = {}
    for key in sorted(flat):
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = flat[key]
    return out


def _coerce(key, value):
    typ = SCHEMA[key][0]
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ is str and isinstance(value, str):
        return value
    if isinstance(value, str):
        try:
            return typ(value)
        except ValueError:
            pass
    raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def resolve(raw: dict, overrides=()) -> dict:
    """Validate a (possibly nested) mapping plus overrides into a full flat dict."""
    flat = flatten(raw)
    for key, value in overrides:
        flat[key] = value
    unknown = sorted(set(flat) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    out = {}
    for key, (_, default) in SCHEMA.items():
        if key in flat:
            out[key] = _coerce(key, flat[key])
        elif default is REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            out[key] = default
    return out


def preset_path(name: str) -> Path:
    return Path(str(resources.files("vpd") / "presets" / f"{name}.toml"))


def load_raw(path_or_name) -> dict:
    p = Path(path_or_name)
    if not p.exists():
        candidate = preset_path(str(path_or_name))
        if not candidate.exists():
            raise ConfigError(f"config {path_or_name!r} is neither a file nor a preset")
        p = candidate
    with open(p, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc


def dumps(flat: dict) -> str:
    return tomli_w.dumps(nest(flat))


@dataclass
class TrainConfig:
    method: str
    beta: float
    env: EnvSpec
    hybrid: HybridConfig
    seed: int = 0
    policy_kind: str = "tabular"
    wrong_bias: float = 0.0
    rollouts_per_prompt: int = 8
    prompts_per_batch: int = 8
    total_batches: int = 100
    estep_frequency: int = 5
    estep_frequency_unit: str = "rollout-batches"
    estep_lr: float = 1.0
    estep_steps: int = 1
    mstep_lr: float = 1.0
    mstep_steps: int = 1
    momentum: float = 0.0
    feedback_mode: str = "env-diagnostic"
    prior_mode: str = "dynamic-student"
    divergence: str = "reverse-kl"
    distill_reduction: str = "mean"
    delta_rule: str = "batch-mean"
    delta_ema_rate: float = 0.1
    sdpo_teacher_rate: float = 0.05
    eval_every: int = 10
    eval_prompts: int = 64
    eval_decode: str = "greedy"
    eval_trials: int = 1
    oracle_checks: bool = False
    oracle_cap: int = 10 ** 6
    checkpoint_every: int = 0
    resolved: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        f = dict(flat)
        env = EnvSpec(f["env.family"], f["env.vocab_size"], f["env.prompt_len"],
                      f["env.response_len"], f["env.transform_key"])
        hybrid = HybridConfig(**{k.split(".", 1)[1]: v for k, v in f.items() if k.startswith("hybrid.")})
        cfg = cls(
            method=f["method"], beta=f["beta"], env=env, hybrid=hybrid, seed=f["seed"],
            policy_kind=f["policy.kind"], wrong_bias=f["init.wrong_bias"],
            rollouts_per_prompt=f["rollouts_per_prompt"], prompts_per_batch=f["prompts_per_batch"],
            total_batches=f["total_batches"], estep_frequency=f["estep_frequency"],
            estep_frequency_unit=f["estep_frequency_unit"], estep_lr=f["estep_lr"],
            estep_steps=f["estep_steps"], mstep_lr=f["mstep_lr"], mstep_steps=f["mstep_steps"],
            momentum=f["momentum"], feedback_mode=f["feedback_mode"], prior_mode=f["prior_mode"],
            divergence=f["divergence"], distill_reduction=f["distill_reduction"],
            delta_rule=f["delta_rule"], delta_ema_rate=f["delta_ema_rate"],
            sdpo_teacher_rate=f["sdpo_teacher_rate"], eval_every=f["eval.every"],
            eval_prompts=f["eval.prompts"], eval_decode=f["eval.decode"],
            eval_trials=f["eval.trials"], oracle_checks=f["oracle_checks"],
            oracle_cap=f["oracle_cap"], checkpoint_every=f["checkpoint_every"], resolved=f,
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path_or_name, overrides=()) -> "TrainConfig":
        return cls.from_flat(resolve(load_raw(path_or_name), overrides))

    @classmethod
    def from_dict(cls, raw: dict, overrides=()) -> "TrainConfig":
        return cls.from_flat(resolve(raw, overrides))

    def with_overrides(self, **kv) -> "TrainConfig":
        flat = dict(self.resolved)
        flat.update({k.replace("__", "."): v for k, v in kv.items()})
        return TrainConfig.from_flat(resolve(flat))

    def validate(self):
        checks = [
            (self.method in METHODS, "method", f"unknown method {self.method!r}"),
            (self.beta > 0, "beta", "beta must be > 0"),
            (self.rollouts_per_prompt >= 2, "rollouts_per_prompt", "GRPO groups need N >= 2"),
            (self.prompts_per_batch >= 1, "prompts_per_batch", "must be >= 1"),
            (self.total_batches >= 1, "total_batches", "must be >= 1"),
            (self.estep_frequency >= 1, "estep_frequency", "F must be >= 1"),
            (self.estep_frequency_unit in ("rollout-batches", "updates"),
             "estep_frequency_unit", "must be 'rollout-batches' or 'updates'"),
            (self.estep_lr > 0, "estep_lr", "must be > 0"),
            (self.mstep_lr > 0, "mstep_lr", "must be > 0"),
            (self.estep_steps >= 1, "estep_steps", "must be >= 1"),
            (self.mstep_steps >= 1, "mstep_steps", "must be >= 1"),
            (0 <= self.momentum < 1, "momentum", "must lie in [0, 1)"),
            (self.feedback_mode in FEEDBACK_MODES, "feedback_mode", "unknown feedback mode"),
            (self.prior_mode in PRIOR_MODES, "prior_mode", "unknown prior mode"),
            (self.divergence in DIVERGENCES, "divergence", "unknown divergence"),
            (self.distill_reduction in ("mean", "sum"), "distill_reduction", "must be mean or sum"),
            (self.delta_rule in DELTA_RULES, "delta_rule", "unknown delta rule"),
            (0 < self.delta_ema_rate <= 1, "delta_ema_rate", "must lie in (0, 1]"),
            (0 <= self.sdpo_teacher_rate <= 1, "sdpo_teacher_rate", "must lie in [0, 1]"),
            (self.policy_kind in ("tabular", "linear-softmax"), "policy.kind", "unknown policy kind"),
            (self.eval_every >= 1, "eval.every", "must be >= 1"),
            (self.eval_prompts >= 1, "eval.prompts", "must be >= 1"),
            (self.eval_decode in ("greedy", "sampled"), "eval.decode", "must be greedy or sampled"),
            (self.eval_trials >= 1, "eval.trials", "must be >= 1"),
            (self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}")
        if self.wrong_bias and self.policy_kind != "tabular":
            raise ConfigError("init.wrong_bias: only supported for tabular policies")

    def dumps(self) -> str:
        return dumps(self.resolved)
