"""Experiment runner.

Builds a federation from an ``ExperimentConfig``, drives it through every
round and writes the metrics files. ``compare_methods`` repeats that over
several configs and seeds and tabulates the final accuracies.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig, config_differences, serialize_config
from .data import BimodalDataset, apply_incongruity, generate, partition_dirichlet, partition_iid
from .errors import BmsError, create_error, handle_errors, wrap_exception
from .federation import Federation, build_clients
from .logging import get_logger
from .models import RoundMetrics, RunSummary
from .network import init_params
from .numkit import RngStream

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
CONFIG_FILE = "config.conf"
COMPARISON_FILE = "comparison.csv"

COMPARISON_HEADER = (
    "label", "method", "seeds",
    "acc_multi_median", "acc_multi_iqr",
    "acc_uni_a_median", "acc_uni_a_iqr",
    "acc_uni_i_median", "acc_uni_i_iqr",
)

RoundCallback = Callable[[RoundMetrics], None]


def build_datasets(config: ExperimentConfig) -> Tuple[BimodalDataset, BimodalDataset]:
    """(train, test) drawn from independent streams of the config seed."""
    def draw(per_class: int, purpose: str) -> BimodalDataset:
        return generate(
            num_classes=config.num_classes,
            per_class=per_class,
            dim_a=config.dim_a,
            dim_i=config.dim_i,
            snr_a=config.snr_a,
            snr_i=config.snr_i,
            stream=RngStream.for_purpose(config.seed, purpose),
            class_scale=config.class_scale,
        )

    return draw(config.per_class, "train-data"), draw(config.test_per_class, "test-data")


def build_federation(config: ExperimentConfig) -> Federation:
    """Datasets, partition, clients and initial model for one run."""
    train, test = build_datasets(config)
    partition_stream = RngStream.for_purpose(config.seed, "partition")
    if config.alpha is None:
        plan = partition_iid(len(train), config.clients, partition_stream)
    else:
        plan = partition_dirichlet(train.labels, config.clients, config.alpha, partition_stream)
    plan = apply_incongruity(
        plan, config.fraction_uni, RngStream.for_purpose(config.seed, "incongruity")
    )
    model = init_params(
        config.dim_a,
        config.dim_i,
        config.num_classes,
        RngStream.for_purpose(config.seed, "init"),
        hidden_dim=config.hidden_dim,
        embedding_dim=config.embedding_dim,
        layers=config.encoder_layers,
    )
    return Federation(config, build_clients(train, plan), test, model)


def best_round(history: Sequence[RoundMetrics]) -> RoundMetrics:
    """Highest acc_multi; the earliest round wins ties."""
    best = history[0]
    for metrics in history[1:]:
        if metrics.acc_multi > best.acc_multi:
            best = metrics
    return best


def write_metrics(history: Sequence[RoundMetrics], path: Path) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(RoundMetrics.CSV_HEADER)
        for metrics in history:
            writer.writerow(metrics.csv_row())


def read_metrics(path: Path) -> List[RoundMetrics]:
    """Parse a metrics.csv written by ``write_metrics``."""
    with open(path, 'r', newline='', encoding='utf-8') as f:
        return [RoundMetrics.from_dict(row) for row in csv.DictReader(f)]


def _prepare_dir(out_dir: Path) -> Path:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise wrap_exception(e, "BMS-801", context={'path': str(out_dir)})
    return out_dir


@handle_errors
def run_experiment(
    config: ExperimentConfig,
    out_dir: Path,
    on_round: Optional[RoundCallback] = None,
) -> RunSummary:
    """Run bootstrap plus ``rounds − 1`` rounds and write the run files.

    Args:
        config: Validated experiment config.
        out_dir: Directory receiving metrics.csv, summary.json and config.conf.
        on_round: Called with each round's metrics as it completes.

    Returns:
        Final-round and best-round metrics.

    Raises:
        BmsError: Every failure, unexpected ones included (BMS-000/002/003/004).
    """
    logger = get_logger()
    out_dir = _prepare_dir(Path(out_dir))
    logger.log_campaign(config.run_label, config.seed, "started", out=str(out_dir))

    try:
        history: List[RoundMetrics] = []
        for metrics in build_federation(config).rounds():
            history.append(metrics)
            if on_round is not None:
                on_round(metrics)
    except BmsError as e:
        logger.log_campaign(config.run_label, config.seed, "failed", error=e.code)
        raise

    summary = RunSummary(
        label=config.run_label,
        method=config.method,
        seed=config.seed,
        rounds=config.rounds,
        final=history[-1],
        best=best_round(history),
    )
    try:
        write_metrics(history, out_dir / METRICS_FILE)
        with open(out_dir / SUMMARY_FILE, 'w', encoding='utf-8') as f:
            json.dump(summary.to_dict(), f, indent=2)
            f.write("\n")
        (out_dir / CONFIG_FILE).write_text(serialize_config(config), encoding='utf-8')
    except OSError as e:
        raise wrap_exception(e, "BMS-801", context={'path': str(out_dir)})

    logger.log_campaign(
        config.run_label, config.seed, "completed",
        acc_multi=summary.final.acc_multi,
        acc_uni_a=summary.final.acc_uni_a,
        acc_uni_i=summary.final.acc_uni_i,
    )
    return summary


@dataclass
class ComparisonRow:
    """Median and IQR of final accuracies for one config across seeds."""
    label: str
    method: str
    seeds: List[int]
    finals: List[RoundMetrics]

    @staticmethod
    def _stats(values: Sequence[float]) -> Tuple[float, float]:
        q1, median, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])
        return float(median), float(q3 - q1)

    def stats(self) -> Dict[str, Tuple[float, float]]:
        return {
            "acc_multi": self._stats([m.acc_multi for m in self.finals]),
            "acc_uni_a": self._stats([m.acc_uni_a for m in self.finals]),
            "acc_uni_i": self._stats([m.acc_uni_i for m in self.finals]),
        }

    def csv_row(self) -> List[str]:
        row = [self.label, self.method, " ".join(str(s) for s in self.seeds)]
        for median, iqr in self.stats().values():
            row.extend([f"{median:.6f}", f"{iqr:.6f}"])
        return row


def check_comparable(configs: Sequence[ExperimentConfig]) -> None:
    """Configs may differ only in method-specific keys and must have unique labels."""
    diffs = config_differences(list(configs))
    if diffs:
        raise create_error(
            "BMS-800",
            technical_details=f"configs differ in {', '.join(diffs)}",
            context={'fields': ",".join(diffs)},
        )
    labels = [c.run_label for c in configs]
    duplicates = sorted({name for name in labels if labels.count(name) > 1})
    if duplicates:
        raise create_error(
            "BMS-800",
            technical_details=f"duplicate labels {', '.join(duplicates)}",
            suggestions=["Give each config a distinct 'label' key"],
        )


@handle_errors
def compare_methods(
    configs: Sequence[ExperimentConfig],
    seeds: Sequence[int],
    out_dir: Path,
    on_run: Optional[Callable[[ExperimentConfig], None]] = None,
) -> List[ComparisonRow]:
    """Run every config under every seed and write comparison.csv.

    Each run lands in ``out_dir/<label>/seed-<seed>/``.
    """
    if not configs or not seeds:
        raise create_error("BMS-802", technical_details="compare needs configs and seeds")
    check_comparable(configs)
    out_dir = _prepare_dir(Path(out_dir))

    rows: List[ComparisonRow] = []
    for base in configs:
        finals: List[RoundMetrics] = []
        for seed in seeds:
            config = base.with_seed(seed)
            if on_run is not None:
                on_run(config)
            summary = run_experiment(config, out_dir / config.run_label / f"seed-{seed}")
            finals.append(summary.final)
        rows.append(ComparisonRow(base.run_label, base.method, list(seeds), finals))

    try:
        with open(out_dir / COMPARISON_FILE, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(COMPARISON_HEADER)
            for row in rows:
                writer.writerow(row.csv_row())
    except OSError as e:
        raise wrap_exception(e, "BMS-801", context={'path': str(out_dir)})
    return rows
