"""Tests for bmsfed CLI commands."""

import json

import numpy as np
import pytest

from bmsfed import __version__
from bmsfed.cli import app
from bmsfed.config import serialize_config
from bmsfed.data import BimodalDataset


class TestBasics:
    """Help, version and argument handling."""

    def test_no_args_shows_help(self, cli_runner):
        result = cli_runner.invoke(app, [])
        assert "Usage" in result.output

    def test_version_command(self, cli_runner):
        result = cli_runner.invoke(app, ["version"])
        assert result.exit_code == 0
        assert f"bmsfed v{__version__}" in result.output

    def test_version_flag(self, cli_runner):
        result = cli_runner.invoke(app, ["--version"])
        assert result.exit_code == 0
        assert __version__ in result.output


class TestShowConfig:
    """Canonical config printing."""

    def test_prints_canonical_form(self, cli_runner, tiny_config, tiny_config_file):
        result = cli_runner.invoke(app, ["show-config", str(tiny_config_file)])
        assert result.exit_code == 0
        assert result.output == serialize_config(tiny_config)

    def test_fills_defaults(self, cli_runner, tmp_path, config_text):
        path = tmp_path / "min.conf"
        path.write_text(config_text)
        result = cli_runner.invoke(app, ["show-config", str(path)])
        assert result.exit_code == 0
        assert "chi = 1.5" in result.output
        assert "alpha = iid" in result.output

    def test_missing_file(self, cli_runner, tmp_path):
        result = cli_runner.invoke(app, ["show-config", str(tmp_path / "absent.conf")])
        assert result.exit_code != 0
        assert "error BMS-701" in result.output

    def test_bad_line(self, cli_runner, tmp_path, config_text):
        path = tmp_path / "bad.conf"
        path.write_text(config_text + "colour = red\n")
        result = cli_runner.invoke(app, ["show-config", str(path)])
        assert result.exit_code != 0
        assert "error BMS-700" in result.output
        assert "line 7" in result.output


class TestRun:
    """Single experiment runs."""

    def test_writes_outputs(self, cli_runner, tmp_path, tiny_config_file):
        out = tmp_path / "out"
        result = cli_runner.invoke(app, ["-q", "run", str(tiny_config_file), "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "metrics.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["final"]["round"] == 3

    def test_default_output_location(self, cli_runner, tiny_config_file, setup_test_environment):
        result = cli_runner.invoke(app, ["-q", "run", str(tiny_config_file)])
        assert result.exit_code == 0, result.output
        assert (setup_test_environment["out_dir"] / "bmsfed" / "seed-3" / "metrics.csv").exists()

    def test_final_table(self, cli_runner, tmp_path, tiny_config_file):
        result = cli_runner.invoke(app, ["run", str(tiny_config_file), "-o", str(tmp_path / "o")])
        assert result.exit_code == 0, result.output
        assert "acc_multi" in result.output

    def test_missing_config(self, cli_runner, tmp_path):
        result = cli_runner.invoke(app, ["run", str(tmp_path / "nope.conf")])
        assert result.exit_code != 0
        assert "error BMS-701" in result.output


class TestCompare:
    """Multi-method, multi-seed comparisons."""

    def test_writes_comparison(self, cli_runner, tmp_path, tiny_config, tiny_config_file):
        from dataclasses import replace

        from bmsfed.config import save_config

        baseline = tmp_path / "fedavg.conf"
        save_config(replace(tiny_config, method="fedavg"), baseline)
        out = tmp_path / "cmp"
        result = cli_runner.invoke(app, [
            "-q", "compare", str(tiny_config_file), str(baseline), "--seeds", "1,2", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        lines = (out / "comparison.csv").read_text().splitlines()
        assert len(lines) == 3
        assert (out / "fedavg" / "seed-2" / "metrics.csv").exists()

    @pytest.mark.parametrize("seeds", ["", "a,b", "1,-2"])
    def test_bad_seeds(self, cli_runner, tiny_config_file, seeds):
        result = cli_runner.invoke(app, ["compare", str(tiny_config_file), "--seeds", seeds])
        assert result.exit_code != 0
        assert "error BMS-802" in result.output

    def test_incomparable_configs(self, cli_runner, tmp_path, tiny_config, tiny_config_file):
        from dataclasses import replace

        from bmsfed.config import save_config

        other = tmp_path / "longer.conf"
        save_config(replace(tiny_config, method="fedavg", rounds=5), other)
        result = cli_runner.invoke(app, [
            "compare", str(tiny_config_file), str(other), "--seeds", "1", "--out", str(tmp_path / "c"),
        ])
        assert result.exit_code != 0
        assert "error BMS-800" in result.output


class TestDumpData:
    """BMSD dataset export."""

    def test_train_and_test(self, cli_runner, tmp_path, tiny_config, tiny_config_file):
        train_path = tmp_path / "train.bmsd"
        test_path = tmp_path / "test.bmsd"
        assert cli_runner.invoke(app, ["-q", "dump-data", str(tiny_config_file), str(train_path)]).exit_code == 0
        assert cli_runner.invoke(
            app, ["-q", "dump-data", str(tiny_config_file), str(test_path), "--test"]
        ).exit_code == 0
        train = BimodalDataset.load(train_path)
        test = BimodalDataset.load(test_path)
        assert len(train) == tiny_config.num_classes * tiny_config.per_class
        assert len(test) == tiny_config.num_classes * tiny_config.test_per_class
        assert not np.array_equal(train.x_a[:5], test.x_a[:5])

    def test_same_config_same_bytes(self, cli_runner, tmp_path, tiny_config_file):
        a, b = tmp_path / "a.bmsd", tmp_path / "b.bmsd"
        cli_runner.invoke(app, ["-q", "dump-data", str(tiny_config_file), str(a)])
        cli_runner.invoke(app, ["-q", "dump-data", str(tiny_config_file), str(b)])
        assert a.read_bytes() == b.read_bytes()
