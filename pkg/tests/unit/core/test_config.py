import json

import pytest

from core.config import (SEED_ENV_VAR, WORKERS_ENV_VAR, get_default_seed, get_default_workers,
                         load_config_file, resolve_run_config)
from core.errors import ConfigError

DEFAULTS = {"clips": 10, "mode": "soundscape", "seed": None}


def test_flags_beat_file_beat_defaults(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    file_config = {"dataset build": {"clips": 50, "mode": "asr"}}
    rc = resolve_run_config("dataset build", DEFAULTS, file_config, {"clips": 7})
    assert rc.options["clips"] == 7
    assert rc.options["mode"] == "asr"
    assert rc.seed == 0


def test_defaults_are_echoed(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    rc = resolve_run_config("dataset build", DEFAULTS, {}, {})
    assert rc.to_dict()["options"] == {"clips": 10, "mode": "soundscape", "seed": 0}


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv(SEED_ENV_VAR, "41")
    assert resolve_run_config("x", DEFAULTS, {}, {}).seed == 41
    assert resolve_run_config("x", DEFAULTS, {"seed": 5}, {}).seed == 5
    assert resolve_run_config("x", DEFAULTS, {"seed": 5, "x": {"seed": 6}}, {}).seed == 6
    assert resolve_run_config("x", DEFAULTS, {"x": {"seed": 6}}, {"seed": 9}).seed == 9


def test_unknown_section_key_rejected():
    with pytest.raises(ConfigError):
        resolve_run_config("x", DEFAULTS, {"x": {"bogus": 1}}, {})


def test_bad_env_values(monkeypatch):
    monkeypatch.setenv(SEED_ENV_VAR, "abc")
    with pytest.raises(ConfigError):
        get_default_seed()
    monkeypatch.setenv(WORKERS_ENV_VAR, "0")
    assert get_default_workers() == 1


def test_load_config_file(tmp_path):
    assert load_config_file(None) == {}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 3}))
    assert load_config_file(path) == {"seed": 3}
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config_file(path)
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config_file(path)
