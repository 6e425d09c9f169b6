"""Tests for the experiment runner and method comparison."""

import csv
import json
from dataclasses import replace

import pytest

from bmsfed.config import load_config
from bmsfed.errors import BmsError
from bmsfed.experiment import (
    COMPARISON_HEADER,
    ComparisonRow,
    best_round,
    build_datasets,
    check_comparable,
    compare_methods,
    read_metrics,
    run_experiment,
)
from bmsfed.models import RoundMetrics


class TestRunExperiment:
    """One run and its files."""

    def test_files_written(self, tmp_path, tiny_config):
        seen = []
        summary = run_experiment(tiny_config, tmp_path / "run", on_round=seen.append)
        assert [m.round for m in seen] == [1, 2, 3]
        assert summary.final.round == 3
        assert summary.rounds == 3

        history = read_metrics(tmp_path / "run" / "metrics.csv")
        assert [m.round for m in history] == [1, 2, 3]
        assert history[-1].acc_multi == pytest.approx(summary.final.acc_multi, abs=1e-6)

        data = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert data["method"] == "bmsfed"
        assert data["best"]["acc_multi"] >= data["final"]["acc_multi"]
        assert load_config(tmp_path / "run" / "config.conf") == tiny_config

    def test_metrics_header(self, tmp_path, tiny_config):
        run_experiment(tiny_config, tmp_path)
        with open(tmp_path / "metrics.csv", newline="") as f:
            header = next(csv.reader(f))
        assert tuple(header) == RoundMetrics.CSV_HEADER

    def test_same_seed_same_bytes(self, tmp_path, tiny_config):
        run_experiment(tiny_config, tmp_path / "a")
        run_experiment(tiny_config, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_other_seed_differs(self, tmp_path, tiny_config):
        run_experiment(tiny_config, tmp_path / "a")
        run_experiment(tiny_config.with_seed(4), tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_unwritable_output(self, tmp_path, tiny_config):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(BmsError) as exc:
            run_experiment(tiny_config, blocker / "run")
        assert exc.value.code == "BMS-801"

    @pytest.mark.parametrize("raised, code", [
        (RuntimeError("boom"), "BMS-000"),
        (KeyboardInterrupt(), "BMS-002"),
        (PermissionError("denied"), "BMS-003"),
        (FileNotFoundError("gone"), "BMS-004"),
    ])
    def test_unexpected_failures_get_codes(self, tmp_path, tiny_config, monkeypatch, raised, code):
        def broken(config):
            raise raised

        monkeypatch.setattr("bmsfed.experiment.build_federation", broken)
        with pytest.raises(BmsError) as exc:
            run_experiment(tiny_config, tmp_path)
        assert exc.value.code == code

    def test_compare_wraps_unexpected_failures(self, tmp_path, tiny_config, monkeypatch):
        def broken(config):
            raise ValueError("bad")

        monkeypatch.setattr("bmsfed.experiment.build_federation", broken)
        with pytest.raises(BmsError) as exc:
            compare_methods([tiny_config], [1], tmp_path)
        assert exc.value.code == "BMS-000"

    def test_train_and_test_are_independent(self, tiny_config):
        train, test = build_datasets(tiny_config)
        assert len(train) == 60 and len(test) == 30
        again, _ = build_datasets(tiny_config)
        assert (again.x_i == train.x_i).all()


class TestBestRound:
    """Best-round bookkeeping."""

    def test_earliest_wins_ties(self):
        history = [RoundMetrics(1, acc_multi=0.5), RoundMetrics(2, acc_multi=0.7), RoundMetrics(3, acc_multi=0.7)]
        assert best_round(history).round == 2


class TestCompare:
    """Median/IQR tables across seeds."""

    def test_stats(self):
        finals = [RoundMetrics(1, acc_multi=v) for v in (0.1, 0.2, 0.3, 0.4, 0.5)]
        row = ComparisonRow("x", "fedavg", [1, 2, 3, 4, 5], finals)
        median, iqr = row.stats()["acc_multi"]
        assert median == pytest.approx(0.3)
        assert iqr == pytest.approx(0.2)
        assert row.csv_row()[:4] == ["x", "fedavg", "1 2 3 4 5", "0.300000"]

    def test_compare_writes_rows(self, tmp_path, tiny_config):
        configs = [tiny_config, replace(tiny_config, method="fedavg", label="avg")]
        rows = compare_methods(configs, [1, 2], tmp_path)
        assert [r.label for r in rows] == ["bmsfed", "avg"]
        with open(tmp_path / "comparison.csv", newline="") as f:
            table = list(csv.reader(f))
        assert tuple(table[0]) == COMPARISON_HEADER
        assert table[2][:3] == ["avg", "fedavg", "1 2"]
        assert (tmp_path / "avg" / "seed-1" / "summary.json").exists()

    def test_duplicate_labels(self, tiny_config):
        with pytest.raises(BmsError) as exc:
            check_comparable([tiny_config, replace(tiny_config, chi=2.0)])
        assert exc.value.code == "BMS-800"

    def test_shared_field_mismatch(self, tiny_config):
        with pytest.raises(BmsError) as exc:
            check_comparable([tiny_config, replace(tiny_config, method="fedavg", clients=5)])
        assert exc.value.code == "BMS-800"
        assert "clients" in exc.value.technical_details

    def test_nothing_to_compare(self, tmp_path, tiny_config):
        with pytest.raises(BmsError) as exc:
            compare_methods([tiny_config], [], tmp_path)
        assert exc.value.code == "BMS-802"
