"""Pytest configuration and fixtures for bmsfed tests."""

import os
import tempfile
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest
from typer.testing import CliRunner

from bmsfed.config import ExperimentConfig
from bmsfed.data import generate
from bmsfed.network import init_params
from bmsfed.numkit import RngStream


@pytest.fixture(scope="session", autouse=True)
def setup_test_environment():
    """Point output and log locations at a temporary directory."""
    with tempfile.TemporaryDirectory() as temp_dir:
        out_dir = Path(temp_dir) / "runs"
        env = {"BMSFED_OUT_DIR": str(out_dir)}
        with patch.dict(os.environ, env):
            os.environ.pop("BMSFED_LOG_FILE", None)
            yield {"out_dir": out_dir, "temp_dir": temp_dir}


@pytest.fixture
def rng():
    """A fresh numpy generator for building test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def stream():
    """A fixed RngStream."""
    return RngStream(7, 11)


@pytest.fixture
def small_params(stream):
    """A small two-encoder model: A width 4, I width 3, 3 classes."""
    return init_params(4, 3, 3, stream, hidden_dim=5, embedding_dim=2, layers=2)


@pytest.fixture
def tiny_dataset():
    """60 samples, 3 classes, informative A and weak I."""
    return generate(3, 20, 4, 3, snr_a=4.0, snr_i=1.0, stream=RngStream(3, 5))


@pytest.fixture
def tiny_config():
    """A run small enough for unit tests (a few seconds at most)."""
    return ExperimentConfig(
        method="bmsfed",
        seed=3,
        rounds=3,
        clients=6,
        budget=3,
        s_sample=3,
        num_classes=3,
        per_class=20,
        test_per_class=10,
        dim_a=4,
        dim_i=3,
        hidden_dim=6,
        embedding_dim=3,
        batch_size=8,
        local_epochs=1,
    )


@pytest.fixture
def config_text():
    """Minimal config text with the required keys."""
    return (
        "# minimal\n"
        "method = bmsfed\n"
        "seed = 1\n"
        "rounds = 2\n"
        "clients = 4\n"
        "budget = 2\n"
    )


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    """tiny_config written to disk in canonical form."""
    from bmsfed.config import save_config

    path = tmp_path / "tiny.conf"
    save_config(tiny_config, path)
    return path


@pytest.fixture
def cli_runner():
    """Typer CLI runner."""
    return CliRunner()
