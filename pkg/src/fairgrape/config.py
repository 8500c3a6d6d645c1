"""Environment defaults and experiment config loading.

Experiment files are flat YAML mappings whose keys name a section path with dots::

    name: biased-mlp
    prune.method: fairgrape
    prune.target_keep: 0.1
    data.synthetic.cell_counts: [[3600, 3600], [400, 400]]

Nested mappings are accepted too; both forms are merged before validation.
"""
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import yaml
from pydantic import ValidationError

from .errors import ConfigError
from .models import ExperimentConfig
from .utils import parse_seed_list

logger = logging.getLogger(__name__)


class Config:
    """Process-wide defaults, overridable through environment variables"""

    OUT_DIR = os.getenv("FAIRGRAPE_OUT_DIR", "runs")
    SEEDS = os.getenv("FAIRGRAPE_SEEDS", "0,1,2")
    WORKERS = int(os.getenv("FAIRGRAPE_WORKERS", "1"))
    LOG_LEVEL = os.getenv("FAIRGRAPE_LOG_LEVEL", "INFO")

    _database_path: Optional[Path] = None

    @classmethod
    def get_database_path(cls, out_dir: Optional[Union[str, Path]] = None) -> Path:
        """Explicit path, else FAIRGRAPE_DATABASE_PATH, else runs.db inside the output dir"""
        if cls._database_path is not None:
            return cls._database_path
        env_path = os.getenv("FAIRGRAPE_DATABASE_PATH")
        if env_path:
            return Path(env_path)
        return Path(out_dir or cls.OUT_DIR) / "runs.db"

    @classmethod
    def set_database_path(cls, path: Optional[Union[str, Path]]):
        cls._database_path = Path(path) if path is not None else None

    @classmethod
    def default_seeds(cls) -> List[int]:
        return parse_seed_list(cls.SEEDS)

    @classmethod
    def validate(cls) -> tuple[bool, list[str]]:
        """Returns (is_valid, warnings/errors)"""
        warnings = []
        errors = []
        try:
            if not cls.default_seeds():
                errors.append("FAIRGRAPE_SEEDS is empty")
        except ValueError:
            errors.append(f"FAIRGRAPE_SEEDS is not a comma-separated integer list: {cls.SEEDS!r}")
        if cls.WORKERS < 1:
            errors.append(f"FAIRGRAPE_WORKERS must be at least 1, got {cls.WORKERS}")
        if logging.getLevelName(cls.LOG_LEVEL.upper()) not in (10, 20, 30, 40, 50):
            warnings.append(f"unknown FAIRGRAPE_LOG_LEVEL {cls.LOG_LEVEL!r}, INFO will be used")
        out = Path(cls.OUT_DIR)
        if out.exists() and not out.is_dir():
            errors.append(f"output path {out} exists and is not a directory")
        return len(errors) == 0, warnings + errors

    @classmethod
    def get_summary(cls) -> dict:
        return {
            "out_dir": cls.OUT_DIR,
            "seeds": cls.SEEDS,
            "workers": cls.WORKERS,
            "log_level": cls.LOG_LEVEL,
            "database_path": str(cls.get_database_path()),
        }


def _set_dotted(target: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = target
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"key '{key}' descends into non-section '{part}'")
        node = child
    if isinstance(value, Mapping) and isinstance(node.get(parts[-1]), dict):
        for sub_key, sub_value in value.items():
            _set_dotted(node[parts[-1]], str(sub_key), sub_value)
    else:
        node[parts[-1]] = value


def unflatten(flat: Mapping[str, Any]) -> Dict[str, Any]:
    """``{"prune.method": "snip"}`` → ``{"prune": {"method": "snip"}}``"""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if isinstance(value, Mapping):
            value = unflatten(value)
        _set_dotted(nested, str(key), value)
    return nested


def flatten(nested: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in nested.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping) and value:
            flat.update(flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def _validation_message(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        location = ".".join(str(p) for p in error["loc"])
        parts.append(f"{location}: {error['msg']}")
    return "; ".join(parts)


def build_config(values: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    merged = unflatten(values)
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(merged, key, value)
    merged.setdefault("output_dir", Config.OUT_DIR)
    merged.setdefault("seeds", Config.default_seeds())
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_validation_message(exc)}") from exc


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Read a flat YAML experiment file (or defaults when ``path`` is None) and apply
    dotted-key overrides such as ``{"prune.method": "snip"}``"""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a key-value mapping")
        values = loaded
    config = build_config(values, overrides)
    if config.data.csv_path is not None:
        csv_path = Path(config.data.csv_path)
        if not csv_path.is_absolute() and path is not None and not csv_path.exists():
            candidate = Path(path).parent / csv_path
            if candidate.exists():
                config.data.csv_path = str(candidate)
        if not Path(config.data.csv_path).is_file():
            raise ConfigError(f"data.csv_path does not exist: {config.data.csv_path}")
    logger.debug("loaded config '%s' (%s, keep %.4g)", config.name, config.prune.method, config.prune.target_keep)
    return config


def dump_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    """Write the config back as a flat dotted-key YAML file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = {k: v for k, v in flatten(config.model_dump(mode="json")).items() if v is not None}
    path.write_text(yaml.safe_dump(flat, sort_keys=True, default_flow_style=None))
    return path
