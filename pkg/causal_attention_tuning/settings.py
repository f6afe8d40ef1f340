from __future__ import annotations

import configparser
import hashlib
import os
import sys
from pathlib import Path
from typing import TYPE_CHECKING

from dotenv import find_dotenv, load_dotenv
from loguru import logger
from platformdirs import user_data_dir

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping

load_dotenv(dotenv_path=find_dotenv(), verbose=True)

logger_format = "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> {extra[stage]} - {message}"

app_dir: str = user_data_dir(
    "causal_attention_tuning",
    "CausalAttentionTuning",
    roaming=True,
    ensure_exists=True,
)

config_location: Path = Path(app_dir) / "config.conf"

config_log_level = "INFO"
config_runs_dir: str = str(Path(app_dir) / "runs")

if config_location.exists():
    config = configparser.ConfigParser()
    config.read(config_location)
    config_log_level = config.get("config", "log_level", fallback=config_log_level)
    config_runs_dir = config.get("config", "runs_dir", fallback=config_runs_dir)

log_level: str = os.getenv("LOG_LEVEL", config_log_level)
runs_dir: str = os.getenv("CAT_RUNS_DIR", config_runs_dir)

# Annotator endpoint. The key is read where it is used and never logged.
api_base: str = os.getenv("CAT_API_BASE", "https://api.openai.com/v1")
api_model: str = os.getenv("CAT_MODEL", "gpt-4o")
api_key_variable = "CAT_API_KEY"

logger.configure(extra={"stage": ""})  # Default value
logger.remove()
logger.add(sys.stderr, format=logger_format, level=log_level)


class ConfigurationError(ValueError):
    """Raised for invalid run configuration or unusable inputs."""


def api_key() -> str:
    """Get the annotator API key from the environment.

    Returns:
        str: The key.

    Raises:
        ConfigurationError: If the variable is unset.
    """
    key: str = os.getenv(api_key_variable, "")
    if not key:
        msg: str = f"Please set the {api_key_variable} environment variable."
        raise ConfigurationError(msg)
    return key


def read_run_config(path: Path | None) -> dict[str, str]:
    """Read an INI run configuration and flatten it to dotted keys.

    [train]
    alpha = 0.2

    becomes {"train.alpha": "0.2"}.

    Args:
        path: The config file. None gives an empty mapping.

    Returns:
        dict[str, str]: Flat dotted keys to raw string values.

    Raises:
        ConfigurationError: If the file does not exist.
    """
    if path is None:
        return {}

    if not path.is_file():
        msg: str = f"Config file not found: {path}"
        raise ConfigurationError(msg)

    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path, encoding="utf-8")
    flat: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = value

    logger.bind(stage="config").debug(f"Read {len(flat)} keys from {path}")
    return flat


def apply_overrides(flat: Mapping[str, str], overrides: Iterable[str]) -> dict[str, str]:
    """Merge "key=value" overrides into a flat config.

    Args:
        flat: The config read from file.
        overrides: Strings like "train.alpha=0.3".

    Returns:
        dict[str, str]: The merged config.

    Raises:
        ConfigurationError: If an override is not of the form section.key=value.
    """
    merged: dict[str, str] = dict(flat)
    for override in overrides:
        key, sep, value = override.partition("=")
        key = key.strip()
        if not sep or "." not in key:
            msg: str = f"Override must look like section.key=value, got {override!r}"
            raise ConfigurationError(msg)
        merged[key] = value.strip()
    return merged


def section(flat: Mapping[str, str], name: str) -> dict[str, str]:
    """Get the keys of one section with the section prefix removed.

    Returns:
        dict[str, str]: Keys without the "name." prefix.
    """
    prefix: str = f"{name}."
    return {key.removeprefix(prefix): value for key, value in flat.items() if key.startswith(prefix)}


def snapshot_text(flat: Mapping[str, str]) -> str:
    """Render a flat config back to canonical INI text (sorted sections and keys).

    Returns:
        str: INI text.
    """
    sections: dict[str, dict[str, str]] = {}
    for key in sorted(flat):
        name, _, option = key.partition(".")
        sections.setdefault(name, {})[option] = flat[key]

    lines: list[str] = []
    for name, options in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{option} = {value}" for option, value in options.items())
        lines.append("")
    return "\n".join(lines)


def config_hash(flat: Mapping[str, str]) -> str:
    """Short hash of the canonical snapshot, used in run directory names.

    Returns:
        str: 10 hex characters.
    """
    return hashlib.sha256(snapshot_text(flat).encode("utf-8")).hexdigest()[:10]


def write_snapshot(flat: Mapping[str, str], run_dir: Path) -> Path:
    """Write config.snapshot.ini next to the run outputs.

    Returns:
        Path: The snapshot file.
    """
    snapshot: Path = run_dir / "config.snapshot.ini"
    with Path.open(snapshot, "w", encoding="utf-8") as file:
        file.write(snapshot_text(flat))
    logger.bind(stage="config").info(f"Saved config snapshot to {snapshot}")
    return snapshot
