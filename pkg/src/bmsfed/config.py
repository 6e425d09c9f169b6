"""Configuration management.

Handles the flat ``key = value`` experiment configuration: parsing,
validation, canonical serialization and the default output location.
"""

import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .federation import METHODS


class ConfigError(Exception):
    """Base exception for configuration errors."""
    code = "BMS-700"


class ConfigFileNotFoundError(ConfigError):
    """Raised when configuration file is not found."""
    code = "BMS-701"


class InvalidConfigFileError(ConfigError):
    """Raised when configuration file cannot be read as key = value lines."""
    pass


class InvalidConfigError(ConfigError):
    """Raised when configuration validation fails."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class ConfigParseError(InvalidConfigFileError):
    """Raised for a bad line; names the line number and key."""

    def __init__(self, message: str, line: int, key: Optional[str] = None):
        where = f"line {line}" + (f" ({key})" if key else "")
        super().__init__(f"{where}: {message}")
        self.line = line
        self.key = key


REQUIRED_KEYS = ("method", "seed", "rounds", "clients", "budget")

# Keys whose values may differ between configs handed to ``compare``.
METHOD_SPECIFIC_KEYS = frozenset({"method", "label", "chi", "s_sample", "drop_prob", "powd_pool"})


@dataclass(frozen=True)
class ExperimentConfig:
    """One training campaign. Field order is the canonical key order."""
    method: str
    seed: int
    rounds: int
    clients: int
    budget: int
    label: str = ""
    s_sample: int = 5
    chi: float = 1.5
    alpha: Optional[float] = None  # None: IID split
    fraction_uni: float = 0.0
    drop_prob: float = 0.5
    lr: float = 0.05
    lr_decay_round: int = 0
    lr_decay_factor: float = 0.1
    local_epochs: int = 2
    bootstrap_epochs: int = 1
    batch_size: int = 32
    num_classes: int = 6
    per_class: int = 200
    test_per_class: int = 100
    dim_a: int = 16
    dim_i: int = 16
    snr_a: float = 4.0
    snr_i: float = 1.0
    class_scale: float = 1.0
    hidden_dim: int = 32
    embedding_dim: int = 16
    encoder_layers: int = 2
    powd_pool: int = 0  # 0: half the clients, rounded up, at least the budget

    @property
    def run_label(self) -> str:
        return self.label or self.method

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise InvalidConfigError(f"Unknown keys: {', '.join(unknown)}", key=unknown[0])
        missing = [k for k in REQUIRED_KEYS if k not in data]
        if missing:
            raise InvalidConfigError(f"Missing required key: {missing[0]}", key=missing[0])
        config = cls(**data)
        validate_config(config)
        return config


_FIELD_TYPES: Dict[str, str] = {
    "method": "str", "label": "str", "alpha": "alpha",
    **{name: "int" for name in (
        "seed", "rounds", "clients", "budget", "s_sample", "lr_decay_round",
        "local_epochs", "bootstrap_epochs", "batch_size", "num_classes", "per_class",
        "test_per_class", "dim_a", "dim_i", "hidden_dim", "embedding_dim",
        "encoder_layers", "powd_pool",
    )},
    **{name: "float" for name in (
        "chi", "fraction_uni", "drop_prob", "lr", "lr_decay_factor", "snr_a", "snr_i",
        "class_scale",
    )},
}


def get_default_config() -> Dict[str, Any]:
    """Get the default values of every optional key.

    Returns:
        Dictionary mapping optional keys to their defaults.
    """
    return {
        f.name: f.default for f in fields(ExperimentConfig) if f.name not in REQUIRED_KEYS
    }


def get_default_output_dir() -> Path:
    """Get the default root for run outputs.

    Returns:
        ``$BMSFED_OUT_DIR`` if set, else ``./runs``.
    """
    if "BMSFED_OUT_DIR" in os.environ:
        return Path(os.environ["BMSFED_OUT_DIR"])
    return Path.cwd() / "runs"


def _convert(key: str, raw: str) -> Any:
    kind = _FIELD_TYPES[key]
    if kind == "str":
        return raw
    if kind == "alpha":
        return None if raw.lower() == "iid" else float(raw)
    if kind == "int":
        return int(raw)
    return float(raw)


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines into a validated config.

    Blank lines and ``#`` comments are ignored. Unknown keys, repeated
    keys, type mismatches and constraint violations raise errors naming
    the line and key.

    Raises:
        ConfigParseError: A line cannot be interpreted.
        InvalidConfigError: A required key is missing.
    """
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigParseError("expected 'key = value'", line=number)
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigParseError("unknown key", line=number, key=key)
        if key in values:
            raise ConfigParseError("key given twice", line=number, key=key)
        if not raw and key != "label":
            raise ConfigParseError("missing value", line=number, key=key)
        try:
            values[key] = _convert(key, raw)
        except ValueError:
            raise ConfigParseError(
                f"expected {_FIELD_TYPES[key]}, got '{raw}'", line=number, key=key
            )
        lines[key] = number

    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise InvalidConfigError(f"Missing required key: {missing[0]}", key=missing[0])

    config = ExperimentConfig(**values)
    try:
        validate_config(config)
    except InvalidConfigError as e:
        if e.key in lines:
            raise ConfigParseError(str(e), line=lines[e.key], key=e.key)
        raise
    return config


def _format_value(value: Any) -> str:
    if value is None:
        return "iid"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical text: every key, in field order, floats via ``repr``."""
    lines = (f"{f.name} = {_format_value(getattr(config, f.name))}" for f in fields(config))
    return "".join(line.rstrip() + "\n" for line in lines)


def load_config(path: Path) -> ExperimentConfig:
    """Load configuration from a ``key = value`` file.

    Args:
        path: Path to the configuration file.

    Returns:
        Parsed, validated configuration.

    Raises:
        ConfigFileNotFoundError: If the file doesn't exist.
        InvalidConfigFileError: If the file is empty or malformed.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigFileNotFoundError(f"Configuration file not found: {path}")

    with open(path, 'r', encoding='utf-8') as f:
        content = f.read()
    if not content.strip():
        raise InvalidConfigFileError(f"Configuration file is empty: {path}")

    return parse_config(content)


def save_config(config: ExperimentConfig, path: Path) -> None:
    """Save configuration in canonical form.

    Args:
        config: Configuration to save.
        path: Path to the output file.
    """
    validate_config(config)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, 'w', encoding='utf-8') as f:
        f.write(serialize_config(config))


def _check(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise InvalidConfigError(f"{key}: {message}", key=key)


def validate_config(config: ExperimentConfig) -> None:
    """Validate value ranges and cross-key constraints.

    Args:
        config: Configuration to validate.

    Raises:
        InvalidConfigError: If validation fails.
    """
    _check(config.method in METHODS, "method",
           f"must be one of {', '.join(METHODS)}, got '{config.method}'")
    _check(config.seed >= 0, "seed", "must be >= 0")
    _check(config.rounds >= 1, "rounds", "must be >= 1")
    _check(config.clients >= 1, "clients", "must be >= 1")
    _check(1 <= config.budget <= config.clients, "budget",
           f"must lie in [1, clients={config.clients}], got {config.budget}")
    _check(config.s_sample >= 1, "s_sample", "must be >= 1")
    _check(math.isfinite(config.chi) and config.chi >= 1.0, "chi", "must be >= 1")
    if config.alpha is not None:
        _check(math.isfinite(config.alpha) and config.alpha > 0, "alpha", "must be > 0 or 'iid'")
    _check(0.0 <= config.fraction_uni <= 1.0, "fraction_uni", "must lie in [0, 1]")
    _check(0.0 <= config.drop_prob <= 1.0, "drop_prob", "must lie in [0, 1]")
    _check(math.isfinite(config.lr) and config.lr >= 0, "lr", "must be >= 0")
    _check(config.lr_decay_round >= 0, "lr_decay_round", "must be >= 0 (0 disables decay)")
    _check(0.0 < config.lr_decay_factor <= 1.0, "lr_decay_factor", "must lie in (0, 1]")
    _check(config.local_epochs >= 1, "local_epochs", "must be >= 1")
    _check(config.bootstrap_epochs >= 1, "bootstrap_epochs", "must be >= 1")
    _check(config.batch_size >= 1, "batch_size", "must be >= 1")
    _check(config.num_classes >= 2, "num_classes", "must be >= 2")
    _check(config.per_class >= 1, "per_class", "must be >= 1")
    _check(config.test_per_class >= 1, "test_per_class", "must be >= 1")
    _check(config.num_classes * config.per_class >= config.clients, "clients",
           "more clients than training samples")
    for key in ("dim_a", "dim_i"):
        _check(getattr(config, key) >= config.num_classes, key, "must be >= num_classes")
    for key in ("snr_a", "snr_i"):
        _check(getattr(config, key) >= 0, key, "must be >= 0")
    _check(config.class_scale > 0, "class_scale", "must be > 0")
    for key in ("hidden_dim", "embedding_dim", "encoder_layers"):
        _check(getattr(config, key) >= 1, key, "must be >= 1")
    _check(config.powd_pool == 0 or config.budget <= config.powd_pool <= config.clients,
           "powd_pool",
           f"must be 0 or lie in [budget={config.budget}, clients={config.clients}]")


def shared_fields(config: ExperimentConfig) -> Tuple[Tuple[str, Any], ...]:
    """Fields that must agree between configs compared side by side."""
    return tuple(
        (f.name, getattr(config, f.name))
        for f in fields(config)
        if f.name not in METHOD_SPECIFIC_KEYS and f.name != "seed"
    )


def config_differences(configs: List[ExperimentConfig]) -> List[str]:
    """Names of shared fields on which the configs disagree."""
    if not configs:
        return []
    reference = dict(shared_fields(configs[0]))
    diffs = []
    for config in configs[1:]:
        for key, value in shared_fields(config):
            if reference[key] != value and key not in diffs:
                diffs.append(key)
    return diffs
