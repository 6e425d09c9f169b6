"""bmsfed Logging System.

Structured logging with levels, optional file output, and rich console display.
"""

from __future__ import annotations

import logging
import os
import sys
import threading
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Optional

if TYPE_CHECKING:
    from .models import RoundMetrics, SelectionOutcome


class BmsLogger:
    """bmsfed logging manager with structured output."""

    def __init__(
        self,
        name: str = "bmsfed",
        log_file: Optional[str] = None,
        level: int = logging.INFO,
        console: bool = True,
        rich_console: bool = True,
    ):
        """Initialize the logger.

        Args:
            name: Logger name (usually "bmsfed")
            log_file: Path to log file (default: $BMSFED_LOG_FILE, else none)
            level: Minimum log level
            console: Whether to log to the console (stderr)
            rich_console: Whether to use Rich for console output
        """
        self.name = name
        self.log_file = log_file or os.environ.get("BMSFED_LOG_FILE")
        self.level = level
        self.console_output = console
        self.rich_console = rich_console

        self._logger: Optional[logging.Logger] = None
        self._lock = threading.Lock()

    def _ensure_logger(self) -> logging.Logger:
        """Ensure the logger is initialized."""
        if self._logger is not None:
            return self._logger

        with self._lock:
            if self._logger is not None:
                return self._logger

            logger = logging.getLogger(self.name)
            logger.setLevel(self.level)
            logger.propagate = False
            logger.handlers.clear()

            formatter = logging.Formatter(
                "%(asctime)s.%(msecs)03d | %(levelname)-8s | %(name)s | %(message)s",
                datefmt="%Y-%m-%d %H:%M:%S",
            )

            if self.log_file:
                Path(self.log_file).parent.mkdir(parents=True, exist_ok=True)
                file_handler = logging.FileHandler(self.log_file, encoding="utf-8")
                file_handler.setLevel(self.level)
                file_handler.setFormatter(formatter)
                logger.addHandler(file_handler)

            if self.console_output:
                console_handler: logging.Handler
                if self.rich_console:
                    from rich.console import Console
                    from rich.logging import RichHandler

                    console_handler = RichHandler(
                        console=Console(stderr=True),
                        show_path=False,
                        markup=False,
                    )
                else:
                    console_handler = logging.StreamHandler(sys.stderr)
                    console_handler.setFormatter(formatter)
                console_handler.setLevel(self.level)
                logger.addHandler(console_handler)

            self._logger = logger
            return logger

    @property
    def logger(self) -> logging.Logger:
        """Get the underlying logger instance."""
        return self._ensure_logger()

    def set_level(self, level: int) -> None:
        """Set the log level on the logger and all of its handlers."""
        self.level = level
        if self._logger:
            self._logger.setLevel(level)
            for handler in self._logger.handlers:
                handler.setLevel(level)

    def debug(self, message: str, **kwargs) -> None:
        """Log a debug message."""
        self.logger.debug(self._format_message(message, kwargs))

    def info(self, message: str, **kwargs) -> None:
        """Log an info message."""
        self.logger.info(self._format_message(message, kwargs))

    def warning(self, message: str, **kwargs) -> None:
        """Log a warning message."""
        self.logger.warning(self._format_message(message, kwargs))

    def error(self, message: str, error_code: Optional[str] = None, **kwargs) -> None:
        """Log an error message.

        Args:
            message: Error message
            error_code: Optional error code (e.g., "BMS-402")
            **kwargs: Additional context
        """
        context = kwargs.copy()
        if error_code:
            context["error_code"] = error_code
        self.logger.error(self._format_message(message, context))

    def log_operation(
        self,
        operation: str,
        status: str,
        details: Optional[Dict[str, Any]] = None,
        error_code: Optional[str] = None,
    ) -> None:
        """Log an operation status.

        Args:
            operation: Name of the operation
            status: Status (started, completed, failed, running, skipped)
            details: Additional details
            error_code: Error code if failed
        """
        message = f"{operation}: {status}"
        if details:
            message = self._format_message(message, details)

        if status == "failed":
            self.error(message, error_code=error_code)
        elif status in ("completed", "started"):
            self.info(message)
        else:
            self.debug(message)

    def _format_message(self, message: str, kwargs: Dict[str, Any]) -> str:
        """Append ``key=value`` context pairs to a message."""
        if not kwargs:
            return message

        context_parts = []
        for key, value in kwargs.items():
            if value is None:
                continue
            if isinstance(value, float):
                value = f"{value:.4f}"
            context_parts.append(f"{key}={value}")

        if context_parts:
            message = f"{message} | {' | '.join(context_parts)}"

        return message

    def log_round(self, metrics: "RoundMetrics") -> None:
        """Log the outcome of one communication round."""
        self.info(
            f"Round {metrics.round} complete",
            acc_multi=metrics.acc_multi,
            acc_uni_a=metrics.acc_uni_a,
            acc_uni_i=metrics.acc_uni_i,
            rho=metrics.global_ratio,
            n_multi=metrics.n_selected_multi,
            n_uni=metrics.n_selected_uni,
            loss=metrics.mean_train_loss,
        )

    def log_selection(self, round_index: int, outcome: "SelectionOutcome") -> None:
        """Log the client roles chosen for a round."""
        self.debug(
            f"Round {round_index} selection",
            weak=outcome.weak_modality.value,
            multi=sorted(outcome.s_m),
            uni=sorted(outcome.s_uni),
        )

    def log_campaign(self, label: str, seed: int, status: str, **details) -> None:
        """Log the lifecycle of one (method, seed) run."""
        self.log_operation(
            operation=f"Run {label} seed={seed}",
            status=status,
            details=details or None,
        )


_default_logger: Optional[BmsLogger] = None


def get_logger(
    name: str = "bmsfed",
    log_file: Optional[str] = None,
    level: int = logging.INFO,
) -> BmsLogger:
    """Get the default bmsfed logger or create a new one.

    Args:
        name: Logger name
        log_file: Log file path
        level: Log level

    Returns:
        BmsLogger instance
    """
    global _default_logger

    if _default_logger is None:
        _default_logger = BmsLogger(name=name, log_file=log_file, level=level)

    return _default_logger


def configure_logging(
    level: str = "INFO",
    log_file: Optional[str] = None,
    verbose: bool = False,
    quiet: bool = False,
) -> BmsLogger:
    """Configure bmsfed logging from command line flags.

    Args:
        level: Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Log file path
        verbose: Enable verbose (debug) logging
        quiet: Suppress most output

    Returns:
        The configured default logger.
    """
    global _default_logger

    level_map = {
        "DEBUG": logging.DEBUG,
        "INFO": logging.INFO,
        "WARNING": logging.WARNING,
        "ERROR": logging.ERROR,
        "CRITICAL": logging.CRITICAL,
    }
    log_level = level_map.get(level.upper(), logging.INFO)

    if verbose:
        log_level = logging.DEBUG
    if quiet:
        log_level = logging.WARNING

    if log_file is not None:
        _default_logger = BmsLogger(log_file=log_file, level=log_level)

    logger = get_logger()
    logger.set_level(log_level)

    if verbose:
        os.environ["BMSFED_DEBUG"] = "1"

    return logger
