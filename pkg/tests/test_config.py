import json

import pytest

from sdad.backend import BackendConfig
from sdad.config import (
    RunConfig,
    config_from_dict,
    interpolate_env,
    load_config,
)
from sdad.errors import ConfigError


class TestInterpolation:
    def test_substitutes_variables(self):
        obj = {"a": "${HOME_DIR}/x", "b": ["${HOME_DIR}", 3], "c": {"d": "plain"}}
        out = interpolate_env(obj, env={"HOME_DIR": "/data"})
        assert out == {"a": "/data/x", "b": ["/data", 3], "c": {"d": "plain"}}

    def test_unset_variable_rejected(self):
        with pytest.raises(ConfigError):
            interpolate_env({"a": "${NOT_SET_ANYWHERE}"}, env={})

    def test_non_strings_untouched(self):
        assert interpolate_env({"n": 3, "f": 1.5, "b": True}, env={}) == {
            "n": 3,
            "f": 1.5,
            "b": True,
        }


class TestConfigDict:
    def test_defaults(self):
        config = config_from_dict({})
        assert config.backend == BackendConfig()
        assert config.manifest is None

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError):
            config_from_dict({"manifesto": "x"})

    def test_unknown_backend_key(self):
        with pytest.raises(ConfigError):
            config_from_dict({"backend": {"port": 80}})

    def test_backend_settings_applied(self):
        config = config_from_dict(
            {"backend": {"endpoint": "http://h", "seed": 9, "dimension": 12}}
        )
        assert config.backend.endpoint == "http://h"
        assert config.backend.seed == 9
        assert config.backend.dimension == 12

    def test_plan_must_be_object(self):
        with pytest.raises(ConfigError):
            config_from_dict({"plan": "inline.json"})


class TestLoadConfig:
    def test_load_with_env(self, tmp_path, monkeypatch):
        path = tmp_path / "run.json"
        path.write_text(
            json.dumps({"manifest": "${DATA_ROOT}/m.jsonl", "log_level": "info"}),
            "utf-8",
        )
        config = load_config(path, env={"DATA_ROOT": "/data"})
        assert config.manifest == "/data/m.jsonl"
        assert config.log_level == "info"

    def test_require_paths(self, tmp_path):
        existing = tmp_path / "m.jsonl"
        existing.write_text("", "utf-8")
        good = RunConfig(manifest=str(existing))
        good.require_paths()
        bad = RunConfig(manifest=str(tmp_path / "missing.jsonl"))
        with pytest.raises(ConfigError):
            bad.require_paths()

    def test_echo_shows_only_divergent_backend_settings(self):
        config = config_from_dict({"backend": {"seed": 3}})
        echo = config.echo()
        assert echo["backend"]["seed"] == 3
        assert "timeout" not in echo["backend"]
