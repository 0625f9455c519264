"""Experiment configuration: defaults < config file < command-line overrides.

Config files hold one ``dotted.key = value`` per line. ``[section]`` headers
prefix the keys that follow, ``#`` starts a comment. Values are decoded as
JSON where possible (numbers, booleans, lists) and kept as strings otherwise.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.data import KNOWN_DATASETS
from src.models import AttackConfig, SplitSpec, TrainConfig

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "CLIPTRAIN_DATA_DIR"
DEFAULT_DATA_DIR = Path("data")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cache_dir: Optional[Path] = None
    datasets: List[Literal["mnist", "fashion_mnist"]] = Field(default_factory=lambda: ["mnist"])
    test_count: int = Field(2000, ge=1)
    regression_samples: int = Field(100, ge=1)
    regression_noise: float = Field(0.02, ge=0.0)
    pair_noise: float = Field(0.1, ge=0.0)
    regression_pairs: int = Field(100, ge=1)


class RegressionSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden: List[int] = Field(default_factory=lambda: [500, 200, 100])
    schedule: List[float] = Field(default_factory=lambda: [10.0, 1.0, 1e-10])
    pretrain_epochs: int = Field(200, ge=1)
    grid_points: int = Field(401, ge=2)

    @model_validator(mode="after")
    def _decreasing(self):
        if any(b >= a for a, b in zip(self.schedule, self.schedule[1:])) or not self.schedule:
            raise ValueError(f"schedule must be nonempty and strictly decreasing, got {self.schedule}")
        return self


class ClassificationSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden: List[int] = Field(default_factory=lambda: [64, 64])
    target_accuracies: List[float] = Field(default_factory=lambda: [0.95, 0.90, 0.85])
    noise_sigma: float = Field(1.0, ge=0.0)
    eval_pairs: int = Field(1000, ge=1)
    eval_pair_updates: int = Field(10, ge=0)
    inspect_pairs: int = Field(16, ge=0)
    write_attack_traces: bool = False


class ExperimentConfig(BaseModel):
    """Everything one recipe run needs; seeds derive from ``seed``."""

    model_config = ConfigDict(extra="forbid")

    recipe: Literal["regression", "classification"] = "regression"
    seed: int = 0
    output_dir: Path = Path("runs/latest")
    data: DataSection = Field(default_factory=DataSection)
    split: SplitSpec = Field(default_factory=SplitSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    regression: RegressionSection = Field(default_factory=RegressionSection)
    classification: ClassificationSection = Field(default_factory=ClassificationSection)


def decode_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _assign(tree: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    if not all(parts):
        raise ConfigError(key, "empty segment in key")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(key, f"'{part}' is a value, not a section")
        node = child
    node[parts[-1]] = value


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Parse dotted key/value text into a nested dict."""
    tree: Dict[str, Any] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError("", f"{source}:{lineno}: expected 'key = value', got '{line}'")
        key, value = line.split("=", 1)
        key = key.strip()
        if section:
            key = f"{section}.{key}"
        _assign(tree, key, decode_value(value))
    return tree


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, value = item.split("=", 1)
    return key.strip(), decode_value(value)


def parse_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    recipe: Optional[str] = None,
) -> ExperimentConfig:
    """Resolve defaults < file < ``--set key=value`` flags into an ExperimentConfig.

    Raises:
        ConfigError: unknown key, type error or range violation, naming the key path
    """
    tree: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            tree = parse_config_text(path.read_text(encoding="utf-8"), str(path))
        except OSError as exc:
            raise ConfigError("", f"cannot read config file {path}: {exc}") from exc
    for item in overrides:
        key, value = parse_override(item)
        _assign(tree, key, value)
    if recipe is not None:
        tree["recipe"] = recipe

    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(part) for part in first["loc"])
        raise ConfigError(key, first["msg"]) from exc


def resolve_data_dir(config: ExperimentConfig, override: Optional[Union[str, Path]] = None) -> Path:
    """Dataset cache directory: CLI flag, then config, then $CLIPTRAIN_DATA_DIR, then ./data."""
    if override:
        return Path(override)
    if config.data.cache_dir is not None:
        return config.data.cache_dir
    env_dir = os.getenv(DATA_DIR_ENV)
    if env_dir:
        return Path(env_dir)
    return DEFAULT_DATA_DIR


def validate_dataset_paths(config: ExperimentConfig, data_dir: Path) -> None:
    """Every configured dataset needs its train and test IDX files under ``data_dir``."""
    from src.data import locate_dataset

    for name in config.data.datasets:
        if name not in KNOWN_DATASETS:
            raise ConfigError("data.datasets", f"unknown dataset '{name}'")
        for part in ("train", "test"):
            try:
                locate_dataset(data_dir, name, part)
            except FileNotFoundError as exc:
                raise ConfigError("data.cache_dir", str(exc)) from exc
