"""bmsfed Error Codes System.

Every failure the simulator can report has a unique code, a short message,
technical details and suggestions.

Error Code Format: BMS-XXX
    - BMS: project identifier
    - XXX: Three-digit error code

Categories:
    000-099: Core/General errors
    100-199: Numeric kernel errors
    200-299: Model errors
    300-399: Balance (prototype/ratio) errors
    400-499: Selection errors
    500-599: Federation errors
    600-699: Data errors
    700-799: Configuration errors
    800-899: CLI/Experiment errors
    900-999: Fatal errors
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Any, Dict, List, Optional


class ErrorSeverity(Enum):
    """Error severity levels."""
    INFO = auto()
    WARNING = auto()
    ERROR = auto()
    FATAL = auto()


class ErrorCategory(Enum):
    """Error categories by system component."""
    CORE = "Core"
    NUMERIC = "Numeric"
    MODEL = "Model"
    BALANCE = "Balance"
    SELECTION = "Selection"
    FEDERATION = "Federation"
    DATA = "Data"
    CONFIG = "Configuration"
    CLI = "CLI/Experiment"
    UNKNOWN = "Unknown"


@dataclass(eq=False)
class BmsError(Exception):
    """Complete error information."""
    code: str
    message: str
    severity: ErrorSeverity
    category: ErrorCategory
    technical_details: str = ""
    suggestions: List[str] = field(default_factory=list)
    original_exception: Optional[Exception] = None
    context: Dict[str, Any] = field(default_factory=dict)

    def __str__(self) -> str:
        text = f"{self.code}: {self.message}"
        if self.technical_details:
            text += f" ({self.technical_details})"
        return text

    def one_line(self) -> str:
        """Single-line diagnosis used for CLI exits."""
        return f"error {self}"


_error_registry: Dict[str, BmsError] = {}


def register_error(error: BmsError) -> None:
    """Register an error in the global registry."""
    _error_registry[error.code] = error


def get_all_errors() -> Dict[str, BmsError]:
    """Get all registered errors."""
    return _error_registry.copy()


def _register(
    code: str,
    message: str,
    category: ErrorCategory,
    technical_details: str,
    suggestions: List[str],
    severity: ErrorSeverity = ErrorSeverity.ERROR,
) -> None:
    register_error(BmsError(
        code=code,
        message=message,
        severity=severity,
        category=category,
        technical_details=technical_details,
        suggestions=suggestions,
    ))


# =============================================================================
# ERROR DEFINITIONS
# =============================================================================

# -----------------------------------------------------------------------------
# Core/General Errors (000-099)
# -----------------------------------------------------------------------------

_register(
    "BMS-000", "An unknown error occurred", ErrorCategory.CORE,
    "No specific error information available",
    ["Run with BMSFED_DEBUG=1 for more details",
     "Re-run with --verbose to see the round log"],
)
_register(
    "BMS-002", "Interrupted by user", ErrorCategory.CORE,
    "User sent interrupt signal (Ctrl+C)",
    ["Rounds completed before the interrupt are not written to disk"],
    severity=ErrorSeverity.INFO,
)
_register(
    "BMS-003", "File permission denied", ErrorCategory.CORE,
    "Cannot read or write required file",
    ["Check file permissions: ls -la <path>"],
)
_register(
    "BMS-004", "Path does not exist", ErrorCategory.CORE,
    "Required file or directory path is missing",
    ["Verify the path is correct"],
)

# -----------------------------------------------------------------------------
# Numeric Kernel Errors (100-199)
# -----------------------------------------------------------------------------

_register(
    "BMS-100", "Matrix dimension mismatch", ErrorCategory.NUMERIC,
    "Operand shapes do not conform",
    ["Check the feature widths in the experiment config"],
)
_register(
    "BMS-101", "Non-finite value produced", ErrorCategory.NUMERIC,
    "A result contains NaN or Inf",
    ["Lower the learning rate", "Check snr values are not extreme"],
)
_register(
    "BMS-102", "Invalid random draw parameter", ErrorCategory.NUMERIC,
    "A standard deviation or subset size is out of range",
    ["Standard deviations must be >= 0",
     "Subset size cannot exceed the universe"],
)

# -----------------------------------------------------------------------------
# Model Errors (200-299)
# -----------------------------------------------------------------------------

_register(
    "BMS-200", "Modality unavailable", ErrorCategory.MODEL,
    "The requested modality is absent from the client's mask",
    ["Only train or evaluate modalities a client actually holds"],
)
_register(
    "BMS-201", "Label out of range", ErrorCategory.MODEL,
    "A class id is negative or >= num_classes",
    ["Check num_classes matches the dataset"],
)
_register(
    "BMS-202", "Stale or missing forward cache", ErrorCategory.MODEL,
    "backward() needs the forward pass of the same parameters and path",
    ["Run forward again after every parameter update"],
)
_register(
    "BMS-203", "Invalid model parameter", ErrorCategory.MODEL,
    "A model hyper-parameter is out of range",
    ["Learning rates must be positive",
     "Encoders need at least one layer"],
)

# -----------------------------------------------------------------------------
# Balance Errors (300-399)
# -----------------------------------------------------------------------------

_register(
    "BMS-300", "Prototype coverage missing", ErrorCategory.BALANCE,
    "A label in the batch has no prototype",
    ["Global prototypes are only complete after the bootstrap round"],
)
_register(
    "BMS-301", "Degenerate batch for imbalance ratio", ErrorCategory.BALANCE,
    "Score sums are empty or vanish",
    ["Use a larger batch size"],
)
_register(
    "BMS-302", "Invalid balance parameter", ErrorCategory.BALANCE,
    "Imbalance ratios must be positive and sample counts >= 1",
    ["Check the reports fed to the aggregator"],
)
_register(
    "BMS-303", "Nothing to aggregate", ErrorCategory.BALANCE,
    "An empty prototype or report set was supplied",
    ["At least one client must report per round"],
)

# -----------------------------------------------------------------------------
# Selection Errors (400-499)
# -----------------------------------------------------------------------------

_register(
    "BMS-400", "Invalid selection call", ErrorCategory.SELECTION,
    "A candidate is already selected or lies outside the universe",
    ["Only evaluate gains for unselected clients"],
)
_register(
    "BMS-401", "Invalid selection parameter", ErrorCategory.SELECTION,
    "Budget, pool size, chi or probability is out of range",
    ["budget must not exceed the number of clients",
     "chi must be >= 1", "drop_prob must lie in [0, 1]"],
)
_register(
    "BMS-402", "Selection infeasible", ErrorCategory.SELECTION,
    "Fewer eligible clients than the round budget",
    ["Lower budget or fraction_uni"],
)
_register(
    "BMS-403", "Similarity matrix update failed", ErrorCategory.SELECTION,
    "Gradient shapes differ or the first refresh is incomplete",
    ["The first refresh must cover every client"],
)

# -----------------------------------------------------------------------------
# Federation Errors (500-599)
# -----------------------------------------------------------------------------

_register(
    "BMS-500", "Federation misconfigured", ErrorCategory.FEDERATION,
    "A client holds no samples or the protocol was run out of order",
    ["Use fewer clients or a larger alpha"],
)
_register(
    "BMS-501", "Upload shape drift", ErrorCategory.FEDERATION,
    "An upload does not match the global parameter shapes",
    ["All clients must start from the broadcast model"],
)
_register(
    "BMS-502", "Empty test set", ErrorCategory.FEDERATION,
    "Evaluation needs at least one sample",
    ["Set test_per_class >= 1"],
)

# -----------------------------------------------------------------------------
# Data Errors (600-699)
# -----------------------------------------------------------------------------

_register(
    "BMS-600", "Invalid data parameter", ErrorCategory.DATA,
    "A dataset generation parameter is out of range",
    ["num_classes must be >= 2", "snr values must be >= 0",
     "feature dims must be >= num_classes"],
)
_register(
    "BMS-601", "Invalid partition request", ErrorCategory.DATA,
    "Partition arguments are out of range",
    ["clients must not exceed the number of samples",
     "alpha must be > 0", "fraction_uni must lie in [0, 1]"],
)
_register(
    "BMS-602", "Partition infeasible", ErrorCategory.DATA,
    "Dirichlet draws kept leaving a client empty",
    ["Raise alpha or lower the number of clients"],
)
_register(
    "BMS-603", "Dataset file invalid", ErrorCategory.DATA,
    "The file is not a BMSD dataset or is truncated",
    ["Regenerate the file with 'bmsfed dump-data'"],
)

# -----------------------------------------------------------------------------
# Configuration Errors (700-799)
# -----------------------------------------------------------------------------

_register(
    "BMS-700", "Invalid experiment config", ErrorCategory.CONFIG,
    "A key is unknown, mistyped or violates a constraint",
    ["Run 'bmsfed show-config <path>' to see the canonical form"],
)
_register(
    "BMS-701", "Config file not found", ErrorCategory.CONFIG,
    "The config path does not exist",
    ["Check the path passed to the command"],
)

# -----------------------------------------------------------------------------
# CLI/Experiment Errors (800-899)
# -----------------------------------------------------------------------------

_register(
    "BMS-800", "Configs are not comparable", ErrorCategory.CLI,
    "Configs passed to compare differ in shared fields",
    ["Configs may only differ in method, label and method-specific keys"],
)
_register(
    "BMS-801", "Output cannot be written", ErrorCategory.CLI,
    "The output directory is not writable",
    ["Pass --out or set BMSFED_OUT_DIR"],
)
_register(
    "BMS-802", "Invalid command argument", ErrorCategory.CLI,
    "An option value could not be interpreted",
    ["Seeds are given as --seeds 1,2,3"],
)

# -----------------------------------------------------------------------------
# Fatal Errors (900-999)
# -----------------------------------------------------------------------------

_register(
    "BMS-900", "Critical system error", ErrorCategory.CORE,
    "Unexpected failure outside the simulator",
    ["Run with BMSFED_DEBUG=1 and inspect the traceback"],
    severity=ErrorSeverity.FATAL,
)


# =============================================================================
# ERROR FACTORY FUNCTIONS
# =============================================================================

def create_error(
    code: str,
    message: Optional[str] = None,
    severity: Optional[ErrorSeverity] = None,
    category: Optional[ErrorCategory] = None,
    technical_details: str = "",
    suggestions: Optional[List[str]] = None,
    original_exception: Optional[Exception] = None,
    context: Optional[Dict[str, Any]] = None,
) -> BmsError:
    """Create a BmsError from a registered error code.

    Args:
        code: The error code (e.g., "BMS-100")
        message: Optional override for the default message
        severity: Optional override for severity
        category: Optional override for category
        technical_details: Additional technical details
        suggestions: Additional suggestions
        original_exception: The original exception that caused this error
        context: Additional context information

    Returns:
        A BmsError instance
    """
    base_error = _error_registry.get(code)

    if base_error is None:
        return BmsError(
            code=code,
            message=message or f"Unknown error: {code}",
            severity=severity or ErrorSeverity.ERROR,
            category=category or ErrorCategory.UNKNOWN,
            technical_details=technical_details,
            suggestions=suggestions or [],
            original_exception=original_exception,
            context=context or {},
        )

    return BmsError(
        code=base_error.code,
        message=message or base_error.message,
        severity=severity or base_error.severity,
        category=category or base_error.category,
        technical_details=technical_details or base_error.technical_details,
        suggestions=list(suggestions or base_error.suggestions),
        original_exception=original_exception,
        context=context or {},
    )


def wrap_exception(
    exception: Exception,
    code: str,
    context: Optional[Dict[str, Any]] = None,
    extra_suggestions: Optional[List[str]] = None,
) -> BmsError:
    """Wrap an exception in a BmsError.

    Args:
        exception: The original exception
        code: The error code to use
        context: Additional context about where the error occurred
        extra_suggestions: Additional suggestions to prepend

    Returns:
        A BmsError wrapping the exception
    """
    suggestions = list(extra_suggestions) if extra_suggestions else []

    if isinstance(exception, PermissionError):
        suggestions.append("Check file permissions")
    elif isinstance(exception, FileNotFoundError):
        suggestions.append("Verify the file path is correct")
    elif isinstance(exception, ValueError):
        suggestions.append("Check the value being used is valid")

    error = create_error(
        code=code,
        technical_details=str(exception),
        original_exception=exception,
        context=context or {},
    )

    if suggestions:
        error.suggestions = suggestions + error.suggestions

    return error


def bms_assert(
    condition: bool,
    code: str,
    details: str = "",
    context: Optional[Dict[str, Any]] = None,
) -> None:
    """Assert a condition and raise a BmsError if false.

    Args:
        condition: The condition to check
        code: Error code to use if assertion fails
        details: Technical details describing the violation
        context: Context about the assertion

    Raises:
        BmsError: If condition is False
    """
    if not condition:
        raise create_error(code, technical_details=details, context=context)


# =============================================================================
# ERROR HANDLING
# =============================================================================

def handle_errors(func):
    """Decorator to wrap functions with bmsfed error handling.

    Catches exceptions and converts them to BmsError with appropriate codes.
    """
    import functools
    import traceback

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except BmsError:
            raise
        except KeyboardInterrupt:
            raise create_error("BMS-002")
        except PermissionError as e:
            raise wrap_exception(e, "BMS-003", {"operation": func.__name__})
        except FileNotFoundError as e:
            raise wrap_exception(e, "BMS-004", {"path": str(e.filename)})
        except Exception as e:
            if os.getenv("BMSFED_DEBUG"):
                traceback.print_exc()
            raise wrap_exception(e, "BMS-000", {"function": func.__name__})

    return wrapper


# =============================================================================
# ERROR DISPLAY
# =============================================================================

def display_error(error: BmsError, console=None) -> None:
    """Display a BmsError to the user as a rich panel.

    Args:
        error: The error to display
        console: Rich console instance (creates one if not provided)
    """
    from rich.box import ROUNDED
    from rich.console import Console
    from rich.panel import Panel
    from rich.text import Text

    if console is None:
        console = Console(stderr=True)

    severity_colors = {
        ErrorSeverity.INFO: "blue",
        ErrorSeverity.WARNING: "yellow",
        ErrorSeverity.ERROR: "red",
        ErrorSeverity.FATAL: "red",
    }
    color = severity_colors.get(error.severity, "red")

    content = Text()
    content.append(f"Error {error.code}\n", style=f"bold {color}")
    content.append(f"\n{error.message}\n", style=color)

    if error.suggestions:
        content.append("\nSuggestions:\n", style="bold")
        for suggestion in error.suggestions:
            content.append(f"  • {suggestion}\n", style="dim")

    if error.technical_details:
        content.append(f"\nDetails: {error.technical_details}", style="dim")

    panel = Panel(
        content,
        title=f" {error.category.value} Error ",
        border_style=color,
        box=ROUNDED,
    )
    console.print(panel)


def exit_code_for(error: BmsError) -> int:
    """Map an error code to a process exit status in 1..125."""
    try:
        code = int(error.code.split("-")[1])
    except (IndexError, ValueError):
        return 1
    return max(1, min(code % 126, 125))


def display_fatal_error(error: BmsError, console=None, verbose: bool = False) -> None:
    """Print a one-line diagnosis, log the error and exit nonzero.

    Args:
        error: The fatal error
        console: Rich console instance (creates one if not provided)
        verbose: Also render the full panel with suggestions
    """
    from rich.console import Console

    if console is None:
        console = Console(stderr=True)

    if verbose or os.getenv("BMSFED_DEBUG"):
        display_error(error, console)
    console.print(error.one_line(), markup=False, highlight=False, soft_wrap=True)

    log_error(error)
    sys.exit(exit_code_for(error))


def log_error(error: BmsError) -> None:
    """Log an error through the bmsfed logger.

    Args:
        error: The error to log
    """
    from .logging import get_logger

    log_message = f"{error.code}: {error.message}"
    if error.original_exception:
        log_message += f" (Exception: {error.original_exception})"

    get_logger().error(log_message, error_code=error.code, **error.context)
