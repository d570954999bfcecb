"""
Configuration management for the FLA toolkit.
Centralizes environment defaults and the key=value config-file loader.
"""

import dataclasses
import os
import typing
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from dotenv import dotenv_values
from dotenv.parser import Binding, parse_stream

from utils import ConfigError, ValidationError


class ToolkitConfig:
    """Configuration class for toolkit defaults"""

    # Detector Configuration
    INPUT_SIZE = int(os.getenv("FLA_INPUT_SIZE", "128"))
    DOWNSAMPLE = int(os.getenv("FLA_DOWNSAMPLE", "4"))
    NUM_CLASSES = int(os.getenv("FLA_NUM_CLASSES", "3"))
    CHANNELS = [int(c) for c in os.getenv("FLA_CHANNELS", "16,32,64,64").split(",")]
    PEAK_THRESHOLD = float(os.getenv("FLA_PEAK_THRESHOLD", "0.3"))
    MAX_DETECTIONS = int(os.getenv("FLA_MAX_DETECTIONS", "32"))

    # Attack Configuration
    ATTACK_RADIUS = int(os.getenv("FLA_ATTACK_RADIUS", "16"))
    BUDGET = float(os.getenv("FLA_BUDGET", str(32.0 / 255.0)))
    MAX_ITERATIONS = int(os.getenv("FLA_MAX_ITERATIONS", "50"))
    NEIGHBOR_RADIUS = int(os.getenv("FLA_NEIGHBOR_RADIUS", "1"))
    REFRESH_THRESHOLD = float(os.getenv("FLA_REFRESH_THRESHOLD", "0.1"))
    JPEG_QUALITY = int(os.getenv("FLA_JPEG_QUALITY", "95"))

    # Training Configuration
    TRAIN_EPOCHS = int(os.getenv("FLA_TRAIN_EPOCHS", "30"))
    BATCH_SIZE = int(os.getenv("FLA_BATCH_SIZE", "32"))
    LEARNING_RATE = float(os.getenv("FLA_LEARNING_RATE", "2e-3"))
    MAP_GATE = float(os.getenv("FLA_MAP_GATE", "0.8"))

    # Dataset Configuration
    N_TRAIN = int(os.getenv("FLA_N_TRAIN", "2000"))
    N_TEST = int(os.getenv("FLA_N_TEST", "500"))
    SEED = int(os.getenv("FLA_SEED", "0"))

    # Execution Configuration
    WORKERS = int(os.getenv("FLA_WORKERS", "4"))

    # Logging Configuration
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    LOG_FORMAT = os.getenv("LOG_FORMAT", "%(asctime)s - %(name)s - %(levelname)s - %(message)s")

    @classmethod
    def get_all_config(cls) -> Dict[str, Any]:
        """Get all configuration values as a dictionary"""
        return {
            key: getattr(cls, key)
            for key in dir(cls)
            if not key.startswith('_') and not callable(getattr(cls, key))
        }

    @classmethod
    def validate_config(cls) -> None:
        """Validate configuration values"""
        errors = []

        if cls.INPUT_SIZE <= 0 or cls.DOWNSAMPLE <= 0:
            errors.append("FLA_INPUT_SIZE and FLA_DOWNSAMPLE must be positive")
        elif cls.INPUT_SIZE % cls.DOWNSAMPLE != 0:
            errors.append("FLA_INPUT_SIZE must be divisible by FLA_DOWNSAMPLE")

        if cls.NUM_CLASSES <= 0:
            errors.append("FLA_NUM_CLASSES must be positive")

        if not (0 < cls.PEAK_THRESHOLD < 1):
            errors.append("FLA_PEAK_THRESHOLD must be between 0 and 1")

        if cls.ATTACK_RADIUS < 0:
            errors.append("FLA_ATTACK_RADIUS cannot be negative")

        if cls.BUDGET <= 0:
            errors.append("FLA_BUDGET must be positive")

        if cls.MAX_ITERATIONS < 1:
            errors.append("FLA_MAX_ITERATIONS must be at least 1")

        if cls.NEIGHBOR_RADIUS < 0:
            errors.append("FLA_NEIGHBOR_RADIUS cannot be negative")

        if not (0 < cls.REFRESH_THRESHOLD < 1):
            errors.append("FLA_REFRESH_THRESHOLD must be between 0 and 1")

        if not (1 <= cls.JPEG_QUALITY <= 100):
            errors.append("FLA_JPEG_QUALITY must be between 1 and 100")

        if cls.TRAIN_EPOCHS < 1 or cls.BATCH_SIZE < 1:
            errors.append("FLA_TRAIN_EPOCHS and FLA_BATCH_SIZE must be positive")

        if not (0 <= cls.MAP_GATE <= 1):
            errors.append("FLA_MAP_GATE must be between 0 and 1")

        if cls.N_TRAIN < 0 or cls.N_TEST < 0:
            errors.append("FLA_N_TRAIN and FLA_N_TEST cannot be negative")

        if cls.WORKERS < 1:
            errors.append("FLA_WORKERS must be at least 1")

        if cls.SEED < 0:
            errors.append("FLA_SEED cannot be negative")

        if errors:
            raise ConfigError("Configuration validation failed:\n" + "\n".join(errors))


def _coerce(raw: str, annotation: Any) -> Any:
    """Convert a config-file string into the dataclass field's type"""
    origin = typing.get_origin(annotation)
    if origin in (list, List):
        (item_type,) = typing.get_args(annotation) or (str,)
        return [_coerce(part.strip(), item_type) for part in raw.split(",") if part.strip()]
    if origin is Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if raw.lower() in ("", "none", "null"):
            return None
        return _coerce(raw, args[0])
    if annotation is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if annotation is int:
        return int(raw)
    if annotation is float:
        if "/" in raw:
            numerator, denominator = raw.split("/", 1)
            return float(numerator) / float(denominator)
        return float(raw)
    return raw


def _binding_line(binding: Binding) -> int:
    """Line of the binding's key; the parser marks bindings before leading blank lines"""
    text = binding.original.string
    return binding.original.line + text[:len(text) - len(text.lstrip())].count("\n")


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse `section.key=value` lines into {section: {key: (raw value, line)}}"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")

    values = dotenv_values(path, interpolate=False)
    sections: Dict[str, Dict[str, Any]] = {}
    with open(path, "r", encoding="utf-8") as stream:
        for binding in parse_stream(stream):
            lineno = _binding_line(binding)
            if binding.error or (binding.key is not None and binding.value is None):
                raise ConfigError(
                    f"{path}:{lineno}: expected section.key=value, got {binding.original.string.strip()!r}"
                )
            if binding.key is None:
                continue
            if "." not in binding.key:
                raise ConfigError(f"{path}:{lineno}: key {binding.key!r} has no section prefix")
            section, name = binding.key.split(".", 1)
            sections.setdefault(section, {})[name] = (values[binding.key], lineno)
    return {
        "__path__": str(path),
        **sections,
    }


def apply_overrides(instance: Any, overrides: Dict[str, Any], source: str = "<config>") -> Any:
    """Return a copy of a dataclass instance with raw string overrides applied"""
    hints = typing.get_type_hints(type(instance))
    field_names = {f.name for f in dataclasses.fields(instance)}
    changes = {}
    for name, entry in overrides.items():
        raw, lineno = entry if isinstance(entry, tuple) else (entry, None)
        where = f"{source}:{lineno}" if lineno is not None else source
        if name not in field_names:
            raise ConfigError(f"{where}: unknown key {name!r} for {type(instance).__name__}")
        try:
            changes[name] = _coerce(str(raw), hints[name])
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {name!r}: {e}") from e
    try:
        return dataclasses.replace(instance, **changes)
    except ValidationError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_section_configs(path: Optional[Union[str, Path]], defaults: Dict[str, Any]) -> Dict[str, Any]:
    """Apply a config file on top of per-section default dataclasses"""
    if path is None:
        return dict(defaults)

    parsed = read_config_file(path)
    source = parsed.pop("__path__")
    result = dict(defaults)
    for section, overrides in parsed.items():
        if section not in result:
            raise ConfigError(
                f"{source}: unknown section {section!r} (expected one of {sorted(result)})"
            )
        result[section] = apply_overrides(result[section], overrides, source)
    return result


# Validate configuration on module import
ToolkitConfig.validate_config()
