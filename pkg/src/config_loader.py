"""
Configuration Loader Module

This module handles loading and parsing run configuration files,
including preset inheritance, environment variable substitution and
conversion into the typed configuration objects used by training,
evaluation and prediction.
"""

import dataclasses
import hashlib
import json
import os
import re
import typing
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml
from dotenv import load_dotenv

from src.data_loader import DataConfig
from src.errors import ConfigurationError
from src.losses import LossWeights
from src.sdnet import ModelConfig
from src.trainer import PROFILE_DEFAULTS, TrainConfig

DEFAULT_RUNS_DIR = "./runs"
PRESETS_DIR = Path(__file__).resolve().parent.parent / "configs" / "presets"

# Preset groups as listed by the `presets` command.
PRESET_GROUPS = {
    "ablation": ["sdnet", "unet-baseline", "sd-only", "sd+scm", "sd+ccm", "smoke"],
    "alpha-sweep": ["alpha-0.1", "alpha-0.2", "alpha-0.4", "alpha-0.6", "alpha-0.8", "alpha-1.0"],
    "variants": [
        "scm-bce-only",
        "scm-dice-only",
        "ccm-after-f1",
        "ccm-after-f2",
        "ccm-after-f3",
        "ccm-sum",
        "sdnet-sdpseg-c",
    ],
}


class ConfigLoader:
    """
    Loads and manages run configuration from YAML files with environment variable support.

    A configuration file mirrors the field names of TrainConfig. It may name a
    parent file through ``extends``; the child is deep-merged over the parent.

    Attributes:
        config_path (Path): Path to the configuration file
        config (Dict): Resolved configuration dictionary
    """

    def __init__(self, config_path: str = "config.yaml"):
        """
        Initialize the configuration loader.

        Args:
            config_path (str): Path to the YAML configuration file, or a preset name
        """
        self.config_path = resolve_config_path(config_path)
        self.config = None
        self._load_env()
        self._load_config()

    def _load_env(self) -> None:
        """
        Load environment variables from .env file if it exists.
        """
        env_file = Path(".env")
        if env_file.exists():
            load_dotenv(env_file)

    def _load_config(self) -> None:
        """
        Load, merge and validate the YAML configuration file.

        Raises:
            FileNotFoundError: If a configuration file in the chain does not exist
            ConfigurationError: If the file is malformed or contains unknown keys
        """
        raw_config = self._read_chain(self.config_path, seen=())
        self.config = self._substitute_env_vars(raw_config)
        self._fill_profile_defaults()
        validate_keys(self.config)

    def _read_chain(self, path: Path, seen: tuple) -> Dict[str, Any]:
        if not path.exists():
            raise FileNotFoundError(f"Configuration file not found: {path}")
        if path in seen:
            raise ConfigurationError(f"Circular 'extends' chain at {path}")

        try:
            with open(path, "r") as file:
                raw = yaml.safe_load(file) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Failed to parse {path}: {e}") from e

        if not isinstance(raw, dict):
            raise ConfigurationError(f"Configuration root must be a mapping: {path}")

        parent_name = raw.pop("extends", None)
        if parent_name is None:
            return raw

        parent_path = (path.parent / f"{parent_name}").resolve()
        if parent_path.suffix != ".yaml":
            parent_path = parent_path.with_name(parent_path.name + ".yaml")
        parent = self._read_chain(parent_path, seen + (path,))
        return deep_merge(parent, raw)

    def _substitute_env_vars(self, config: Any) -> Any:
        """
        Recursively substitute environment variables in configuration values.

        Supports ${VAR_NAME} and ${VAR_NAME:default_value} syntax.

        Args:
            config (Any): Configuration value (can be dict, list, str, etc.)

        Returns:
            Any: Configuration with environment variables substituted
        """
        if isinstance(config, dict):
            return {key: self._substitute_env_vars(value) for key, value in config.items()}
        elif isinstance(config, list):
            return [self._substitute_env_vars(item) for item in config]
        elif isinstance(config, str):
            return self._substitute_string(config)
        else:
            return config

    def _substitute_string(self, value: str) -> str:
        pattern = r'\$\{([^}:]+)(?::([^}]+))?\}'

        def replacer(match):
            var_name = match.group(1)
            default_value = match.group(2) if match.group(2) else ""
            return os.getenv(var_name, default_value)

        return re.sub(pattern, replacer, value)

    def _fill_profile_defaults(self) -> None:
        profile = self.config.get("dataset_profile", "sdpseg_s")
        for key, value in PROFILE_DEFAULTS.get(profile, {}).items():
            self.config.setdefault(key, value)

    def get(self, *keys: str, default: Any = None) -> Any:
        """
        Get a configuration value using dot notation.

        Args:
            *keys: Configuration key path (e.g., 'loss_weights', 'alpha')
            default: Default value if key not found

        Returns:
            Any: Configuration value or default
        """
        value = self.config
        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def apply_overrides(self, overrides: Mapping[str, Any]) -> None:
        """
        Apply command-line overrides given as dotted keys.

        ``None`` values are skipped so unset flags leave the file untouched.

        Args:
            overrides (Mapping): e.g. {'seed': 3, 'loss_weights.ccm_reduction': 'sum'}

        Raises:
            ConfigurationError: If an override names an unknown key
        """
        for dotted_key, value in overrides.items():
            if value is None:
                continue
            node = self.config
            *parents, leaf = dotted_key.split(".")
            for key in parents:
                node = node.setdefault(key, {})
            node[leaf] = value
        validate_keys(self.config)

    def get_train_config(self) -> TrainConfig:
        """
        Build the typed training configuration.

        Returns:
            TrainConfig: Validated training configuration
        """
        return build_train_config(self.config)

    def get_model_config(self) -> ModelConfig:
        return self.get_train_config().model

    def get_loss_weights(self) -> LossWeights:
        return self.get_train_config().loss_weights

    def get_data_config(self) -> DataConfig:
        return self.get_train_config().data

    def config_hash(self) -> str:
        """
        Hash of the resolved configuration.

        Returns:
            str: SHA-256 hex digest of the canonical JSON encoding
        """
        return hash_config(self.config)

    def reload(self) -> None:
        """
        Reload the configuration from file.
        """
        self._load_env()
        self._load_config()


def resolve_config_path(config_path: str) -> Path:
    """
    Resolve a path or a bare preset name to a configuration file.

    Args:
        config_path (str): File path, or preset name such as 'sd+scm'

    Returns:
        Path: Configuration file path
    """
    path = Path(config_path)
    if path.exists() or path.suffix == ".yaml":
        return path
    return PRESETS_DIR / f"{config_path}.yaml"


def list_presets() -> Dict[str, list]:
    """Return the preset groups, keeping only presets shipped on disk."""
    return {
        group: [name for name in names if (PRESETS_DIR / f"{name}.yaml").exists()]
        for group, names in PRESET_GROUPS.items()
    }


def runs_dir() -> Path:
    """Run-directory root, overridable with the SDSEG_RUNS_DIR environment variable."""
    return Path(os.getenv("SDSEG_RUNS_DIR", DEFAULT_RUNS_DIR))


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def hash_config(config: Mapping[str, Any]) -> str:
    canonical = json.dumps(config, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def validate_keys(config: Mapping[str, Any], cls: type = TrainConfig, prefix: str = "") -> None:
    """
    Reject keys that are not fields of the target dataclass.

    Args:
        config (Mapping): Configuration subtree
        cls (type): Dataclass describing the subtree
        prefix (str): Dotted path of the subtree, for error messages

    Raises:
        ConfigurationError: Naming the first unknown key
    """
    hints = typing.get_type_hints(cls)
    for key, value in config.items():
        dotted = f"{prefix}{key}"
        if key not in hints:
            raise ConfigurationError(f"Unknown configuration key: '{dotted}'")
        if dataclasses.is_dataclass(hints[key]):
            if not isinstance(value, Mapping):
                raise ConfigurationError(f"Configuration key '{dotted}' must be a mapping")
            validate_keys(value, hints[key], prefix=f"{dotted}.")


def build_train_config(config: Mapping[str, Any]) -> TrainConfig:
    """
    Convert a resolved configuration tree into a validated TrainConfig.

    Args:
        config (Mapping): Resolved configuration dictionary

    Returns:
        TrainConfig: Typed configuration

    Raises:
        ConfigurationError: On unknown keys, wrong value types or invalid values
    """
    validate_keys(config)
    train_config = _build_dataclass(TrainConfig, config, prefix="")
    train_config.validate()
    return train_config


def config_to_dict(obj: Any) -> Any:
    """Serialize a configuration dataclass into JSON-compatible values."""
    if dataclasses.is_dataclass(obj):
        return {f.name: config_to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, frozenset):
        return sorted(obj)
    if isinstance(obj, (tuple, list)):
        return [config_to_dict(item) for item in obj]
    return obj


def _build_dataclass(cls: type, data: Mapping[str, Any], prefix: str) -> Any:
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(value, hints[key], f"{prefix}{key}")
    return cls(**kwargs)


def _coerce(value: Any, hint: Any, dotted: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if dataclasses.is_dataclass(hint):
        return _build_dataclass(hint, value, prefix=f"{dotted}.")

    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [arg for arg in args if arg is not type(None)][0]
        return _coerce(value, inner, dotted)

    try:
        if origin is tuple:
            if isinstance(value, str) or not isinstance(value, (list, tuple)):
                raise TypeError("expected a list")
            return tuple(_coerce(item, args[0], dotted) for item in value)
        if origin is frozenset:
            if isinstance(value, str) or not isinstance(value, (list, tuple, set, frozenset)):
                raise TypeError("expected a list")
            return frozenset(_coerce(item, args[0], dotted) for item in value)
        if hint is bool:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return lowered in ("true", "1", "yes")
            if not isinstance(value, bool):
                raise TypeError("expected a boolean")
            return value
        if hint is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError("expected an integer")
            return int(value)
        if hint is float:
            if isinstance(value, bool):
                raise TypeError("expected a number")
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(
            f"Invalid value for configuration key '{dotted}': {value!r} ({e})"
        ) from e

    return value
