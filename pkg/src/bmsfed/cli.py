"""CLI entry point.

Typer-based command line interface for bmsfed.
Every failure exits nonzero with a one-line ``error BMS-XXX`` diagnosis.
"""

from pathlib import Path
from typing import List, Optional

import typer
from rich.box import ROUNDED
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn
from rich.table import Table
from rich.text import Text

from .config import (
    ConfigError,
    ConfigFileNotFoundError,
    ExperimentConfig,
    get_default_output_dir,
    load_config,
    serialize_config,
)
from .errors import BmsError, create_error, display_fatal_error, wrap_exception
from .experiment import build_datasets, compare_methods, run_experiment
from .logging import configure_logging, get_logger
from .models import RoundMetrics

app = typer.Typer(
    name="bmsfed",
    help="Balanced modality selection simulator for multi-modal federated learning",
    rich_markup_mode="rich",
    no_args_is_help=True,
)

console = Console()
err_console = Console(stderr=True)

_state = {"quiet": False, "verbose": False}


def _fail(error: BmsError) -> None:
    display_fatal_error(error, console=err_console, verbose=_state["verbose"])


def _load(path: Path) -> ExperimentConfig:
    """Load a config file, mapping config exceptions onto error codes."""
    try:
        return load_config(path)
    except ConfigFileNotFoundError as e:
        raise wrap_exception(e, e.code, context={'path': str(path)})
    except ConfigError as e:
        raise create_error(
            e.code,
            technical_details=f"{path}: {e}",
            original_exception=e,
            context={'path': str(path)},
        )


def _parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise create_error("BMS-802", technical_details=f"--seeds '{text}'")
    if not seeds or any(s < 0 for s in seeds):
        raise create_error("BMS-802", technical_details=f"--seeds '{text}'")
    return seeds


def _round_table(metrics: RoundMetrics, title: str) -> Table:
    table = Table(title=title, box=ROUNDED)
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right")
    table.add_row("round", str(metrics.round))
    table.add_row("acc_multi", f"{metrics.acc_multi:.4f}")
    table.add_row("acc_uni_a", f"{metrics.acc_uni_a:.4f}")
    table.add_row("acc_uni_i", f"{metrics.acc_uni_i:.4f}")
    table.add_row("global ρ_I", f"{metrics.global_ratio:.4f}")
    table.add_row("weak modality", metrics.weak_modality.value)
    return table


def _version_callback(value: bool) -> None:
    if value:
        from . import __version__
        console.print(f"bmsfed {__version__}")
        raise typer.Exit()


@app.callback()
def main_callback(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
    quiet: bool = typer.Option(False, "--quiet", "-q", help="Only warnings and errors"),
    version: Optional[bool] = typer.Option(
        None, "--version", callback=_version_callback, is_eager=True,
        help="Show version and exit",
    ),
):
    """bmsfed: deterministic multi-modal federated learning runs."""
    _state["quiet"] = quiet
    _state["verbose"] = verbose
    configure_logging(verbose=verbose, quiet=quiet)


@app.command()
def run(
    config_path: Path = typer.Argument(..., help="Experiment config (key = value lines)"),
    out: Optional[Path] = typer.Option(
        None, "--out", "-o", help="Output directory (default: $BMSFED_OUT_DIR/<label>/seed-<seed>)"
    ),
):
    """Run one experiment and write metrics.csv and summary.json."""
    try:
        config = _load(config_path)
        out_dir = out or get_default_output_dir() / config.run_label / f"seed-{config.seed}"

        if not _state["quiet"]:
            console.print(Panel.fit(
                f"[bold green]{config.run_label}[/bold green]\n"
                f"[dim]method={config.method} seed={config.seed} rounds={config.rounds} "
                f"clients={config.clients} budget={config.budget}[/dim]",
                title="bmsfed run",
                border_style="green",
                box=ROUNDED,
            ))

        with Progress(
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            console=console,
            disable=_state["quiet"],
            transient=True,
        ) as progress:
            task = progress.add_task("rounds", total=config.rounds)
            summary = run_experiment(
                config, out_dir, on_round=lambda m: progress.advance(task)
            )

        if not _state["quiet"]:
            console.print(_round_table(summary.final, "Final round"))
            console.print(f"\n[green]✓ Wrote {out_dir}[/green]")
    except BmsError as e:
        _fail(e)
    except KeyboardInterrupt:
        _fail(create_error("BMS-002"))


@app.command()
def compare(
    config_paths: List[Path] = typer.Argument(..., help="Configs differing only in method keys"),
    seeds: str = typer.Option(..., "--seeds", "-s", help="Comma-separated seeds, e.g. 1,2,3"),
    out: Optional[Path] = typer.Option(
        None, "--out", "-o", help="Output directory (default: $BMSFED_OUT_DIR/compare)"
    ),
):
    """Run each config under each seed and tabulate median/IQR accuracies."""
    try:
        seed_list = _parse_seeds(seeds)
        configs = [_load(p) for p in config_paths]
        out_dir = out or get_default_output_dir() / "compare"

        def announce(config: ExperimentConfig) -> None:
            if not _state["quiet"]:
                console.print(f"[cyan]▶[/cyan] {config.run_label} seed={config.seed}")

        rows = compare_methods(configs, seed_list, out_dir, on_run=announce)

        if not _state["quiet"]:
            table = Table(title="Final accuracies (median ± IQR)", box=ROUNDED)
            table.add_column("Label", style="cyan")
            table.add_column("Method")
            for name in ("acc_multi", "acc_uni_a", "acc_uni_i"):
                table.add_column(name, justify="right")
            for row in rows:
                cells = [f"{m:.4f} ± {iqr:.4f}" for m, iqr in row.stats().values()]
                table.add_row(row.label, row.method, *cells)
            console.print(table)
            console.print(f"\n[green]✓ Wrote {out_dir / 'comparison.csv'}[/green]")
    except BmsError as e:
        _fail(e)
    except KeyboardInterrupt:
        _fail(create_error("BMS-002"))


@app.command("show-config")
def show_config(
    config_path: Path = typer.Argument(..., help="Experiment config to validate and print"),
):
    """Print the canonical form of a config, defaults filled in."""
    try:
        config = _load(config_path)
    except BmsError as e:
        _fail(e)
        return
    typer.echo(serialize_config(config), nl=False)


@app.command("dump-data")
def dump_data(
    config_path: Path = typer.Argument(..., help="Experiment config describing the data"),
    path: Path = typer.Argument(..., help="Destination .bmsd file"),
    test: bool = typer.Option(False, "--test", help="Dump the test set instead of the train set"),
):
    """Write a config's synthetic dataset in the BMSD binary format."""
    try:
        config = _load(config_path)
        train, test_set = build_datasets(config)
        dataset = test_set if test else train
        dataset.dump(path)
        get_logger().info("Dataset written", path=str(path), samples=len(dataset))
        if not _state["quiet"]:
            console.print(
                f"[green]✓ {len(dataset)} samples "
                f"({dataset.dim_a}+{dataset.dim_i} features, {dataset.num_classes} classes) "
                f"→ {path}[/green]"
            )
    except BmsError as e:
        _fail(e)


@app.command()
def version():
    """Show bmsfed version."""
    from . import __version__

    version_text = Text()
    version_text.append("bmsfed v", style="green")
    version_text.append(__version__, style="bold cyan")
    version_text.append("\nBalanced modality selection for multi-modal FL", style="dim")

    console.print(Panel(version_text, title="Version", border_style="green", box=ROUNDED))


def main():
    """Main entry point with error handling."""
    try:
        app()
    except BmsError as e:
        _fail(e)
    except KeyboardInterrupt:
        raise typer.Exit(130)


if __name__ == "__main__":
    main()
