import sys

import pytest

from vpd.config import SCHEMA, TrainConfig, dumps, load_raw, resolve
from vpd.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MINIMAL = {"method": "vpd", "beta": 0.1,
           "env": {"family": "mod-sum", "vocab_size": 5, "prompt_len": 2, "response_len": 1}}


def test_defaults_are_materialized():
    flat = resolve(MINIMAL)
    assert set(flat) == set(SCHEMA)
    assert flat["estep_frequency"] == 5 and flat["rollouts_per_prompt"] == 8
    assert flat["sdpo_teacher_rate"] == 0.05


def test_round_trip_is_idempotent():
    text = dumps(resolve(MINIMAL))
    again = dumps(resolve(tomllib.loads(text)))
    assert text == again


def test_unknown_and_missing_keys_are_named():
    with pytest.raises(ConfigError, match="env.colour"):
        resolve({**MINIMAL, "env": {**MINIMAL["env"], "colour": 1}})
    raw = dict(MINIMAL)
    del raw["beta"]
    with pytest.raises(ConfigError, match="beta"):
        resolve(raw)


def test_overrides_are_coerced():
    flat = resolve(MINIMAL, [("seed", "7"), ("beta", "0.5"), ("oracle_checks", "true")])
    assert flat["seed"] == 7 and flat["beta"] == 0.5 and flat["oracle_checks"] is True
    with pytest.raises(ConfigError, match="seed"):
        resolve(MINIMAL, [("seed", "seven")])


@pytest.mark.parametrize("key,value", [("method", "ppo"), ("beta", "0"), ("rollouts_per_prompt", "1"),
                                       ("estep_frequency", "0"), ("divergence", "tv"),
                                       ("momentum", "1.0"), ("hybrid.ppo_clip", "1.5")])
def test_invalid_values_rejected(key, value):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(MINIMAL, [(key, value)])


@pytest.mark.parametrize("name", ["oracle_toy", "vpd_keyedcopy", "modsum_hard"])
def test_presets_load(name):
    cfg = TrainConfig.load(name)
    assert cfg.resolved == resolve(load_raw(name))
