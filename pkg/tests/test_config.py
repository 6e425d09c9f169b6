"""Tests for bmsfed configuration management."""

import os
from dataclasses import replace
from pathlib import Path
from unittest.mock import patch

import pytest


class TestConfigModule:
    """Test the config module exists and can be imported."""

    def test_config_module_import(self):
        from bmsfed import config
        assert config is not None

    def test_config_module_has_docstring(self):
        from bmsfed import config
        assert config.__doc__ is not None
        assert "Configuration" in config.__doc__


class TestDefaults:
    """Defaults and the output location."""

    def test_default_config_excludes_required(self):
        from bmsfed.config import REQUIRED_KEYS, get_default_config

        defaults = get_default_config()
        assert not set(REQUIRED_KEYS) & set(defaults)
        assert defaults["chi"] == 1.5
        assert defaults["alpha"] is None
        assert defaults["local_epochs"] == 2

    def test_output_dir_from_env(self, tmp_path):
        from bmsfed.config import get_default_output_dir

        with patch.dict(os.environ, {"BMSFED_OUT_DIR": str(tmp_path)}):
            assert get_default_output_dir() == tmp_path

    def test_output_dir_fallback(self):
        from bmsfed.config import get_default_output_dir

        with patch.dict(os.environ, {}, clear=True):
            assert get_default_output_dir() == Path.cwd() / "runs"


class TestParsing:
    """key = value parsing."""

    def test_minimal(self, config_text):
        from bmsfed.config import parse_config

        config = parse_config(config_text)
        assert config.method == "bmsfed"
        assert config.clients == 4
        assert config.s_sample == 5
        assert config.run_label == "bmsfed"

    def test_comments_and_blank_lines(self, config_text):
        from bmsfed.config import parse_config

        text = "\n\n" + config_text + "chi = 2.0   # tighter routing\n"
        assert parse_config(text).chi == 2.0

    def test_iid_and_alpha(self, config_text):
        from bmsfed.config import parse_config

        assert parse_config(config_text + "alpha = iid\n").alpha is None
        assert parse_config(config_text + "alpha = 0.3\n").alpha == 0.3

    def test_empty_label_allowed(self, config_text):
        from bmsfed.config import parse_config

        assert parse_config(config_text + "label =\n").label == ""

    @pytest.mark.parametrize("extra, line, key", [
        ("colour = red\n", 7, "colour"),
        ("seed = 2\n", 7, "seed"),
        ("rounds = many\n", 7, "rounds"),
        ("just words\n", 7, None),
        ("chi =\n", 7, "chi"),
    ])
    def test_bad_lines_name_line_and_key(self, config_text, extra, line, key):
        from bmsfed.config import ConfigParseError, parse_config

        with pytest.raises(ConfigParseError) as exc:
            parse_config(config_text + extra)
        assert exc.value.line == line
        assert exc.value.key == key
        assert f"line {line}" in str(exc.value)

    def test_constraint_violation_points_at_key(self, config_text):
        from bmsfed.config import ConfigParseError, parse_config

        with pytest.raises(ConfigParseError) as exc:
            parse_config(config_text.replace("budget = 2", "budget = 9"))
        assert exc.value.key == "budget"
        assert exc.value.line == 6

    def test_missing_required(self):
        from bmsfed.config import InvalidConfigError, parse_config

        with pytest.raises(InvalidConfigError) as exc:
            parse_config("method = fedavg\nseed = 1\n")
        assert exc.value.key == "rounds"

    def test_error_codes(self):
        from bmsfed.config import ConfigError, ConfigFileNotFoundError, ConfigParseError

        assert ConfigError.code == "BMS-700"
        assert ConfigFileNotFoundError.code == "BMS-701"
        assert ConfigParseError.code == "BMS-700"


class TestValidation:
    """Value ranges and cross-key constraints."""

    @pytest.mark.parametrize("changes, key", [
        ({"method": "sgd"}, "method"),
        ({"budget": 0}, "budget"),
        ({"chi": 0.5}, "chi"),
        ({"alpha": -1.0}, "alpha"),
        ({"fraction_uni": 1.5}, "fraction_uni"),
        ({"dim_a": 2}, "dim_a"),
        ({"lr_decay_factor": 0.0}, "lr_decay_factor"),
        ({"powd_pool": 99}, "powd_pool"),
        ({"powd_pool": 2}, "powd_pool"),
        ({"per_class": 1, "num_classes": 2, "clients": 6, "budget": 2}, "clients"),
    ])
    def test_rejects(self, tiny_config, changes, key):
        from bmsfed.config import InvalidConfigError, validate_config

        with pytest.raises(InvalidConfigError) as exc:
            validate_config(replace(tiny_config, **changes))
        assert exc.value.key == key

    def test_accepts_tiny(self, tiny_config):
        from bmsfed.config import validate_config

        validate_config(tiny_config)

    def test_powd_pool_bounds(self, tiny_config):
        from bmsfed.config import validate_config
        from bmsfed.federation import powd_pool_size

        exact = replace(tiny_config, powd_pool=tiny_config.budget)
        validate_config(exact)
        assert powd_pool_size(exact) == 3
        assert powd_pool_size(tiny_config) == 3
        assert powd_pool_size(replace(tiny_config, budget=4)) == 4

    def test_from_dict_unknown_key(self, tiny_config):
        from bmsfed.config import ExperimentConfig, InvalidConfigError

        data = tiny_config.to_dict()
        data["colour"] = "red"
        with pytest.raises(InvalidConfigError):
            ExperimentConfig.from_dict(data)

    def test_dict_roundtrip(self, tiny_config):
        from bmsfed.config import ExperimentConfig

        assert ExperimentConfig.from_dict(tiny_config.to_dict()) == tiny_config


class TestPersistence:
    """Canonical serialization, save and load."""

    def test_serialize_is_canonical(self, tiny_config):
        from bmsfed.config import parse_config, serialize_config

        text = serialize_config(tiny_config)
        assert text.splitlines()[0] == "method = bmsfed"
        assert "alpha = iid" in text
        assert "chi = 1.5" in text
        assert serialize_config(parse_config(text)) == text

    def test_save_then_load(self, tmp_path, tiny_config):
        from bmsfed.config import load_config, save_config

        path = tmp_path / "nested" / "run.conf"
        config = replace(tiny_config, label="tiny run", alpha=0.1)
        save_config(config, path)
        assert load_config(path) == config

    def test_load_missing(self, tmp_path):
        from bmsfed.config import ConfigFileNotFoundError, load_config

        with pytest.raises(ConfigFileNotFoundError):
            load_config(tmp_path / "absent.conf")

    def test_load_empty(self, tmp_path):
        from bmsfed.config import InvalidConfigFileError, load_config

        path = tmp_path / "empty.conf"
        path.write_text("  \n")
        with pytest.raises(InvalidConfigFileError):
            load_config(path)


class TestComparability:
    """Which fields may differ between configs run side by side."""

    def test_method_fields_may_differ(self, tiny_config):
        from bmsfed.config import config_differences

        other = replace(tiny_config, method="fedavg", label="base", chi=2.0, seed=9)
        assert config_differences([tiny_config, other]) == []

    def test_shared_fields_reported(self, tiny_config):
        from bmsfed.config import config_differences

        other = replace(tiny_config, rounds=5, snr_i=0.5)
        assert config_differences([tiny_config, other]) == ["rounds", "snr_i"]

    def test_empty_list(self):
        from bmsfed.config import config_differences

        assert config_differences([]) == []
