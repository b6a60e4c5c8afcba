import os
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

from dotenv import dotenv_values, load_dotenv

load_dotenv()


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got {raw!r}. Please fix it in your .env file.")


DEFAULT_SEED = _env_int("DCLS_AUDIO_SEED", 0)
DEFAULT_THREADS = _env_int("DCLS_AUDIO_THREADS", 1)
LOG_LEVEL = os.getenv("DCLS_AUDIO_LOG_LEVEL", "WARNING").upper()
DATA_DIR = Path(os.getenv("DCLS_AUDIO_DATA_DIR", "data"))

if DEFAULT_THREADS < 1:
    raise ValueError("DCLS_AUDIO_THREADS must be at least 1.")


class ConfigError(Exception):
    """Custom exception for configuration file related errors."""
    pass


def load_key_value_file(path: Union[str, Path]) -> Dict[str, str]:
    """
    Read a flat ``key=value`` text file (``#`` starts a comment).

    Args:
        path (Union[str, Path]): File to read

    Returns:
        Dict[str, str]: Keys mapped to their raw string values

    Raises:
        ConfigError: If the file is missing or a key has no value
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")

    values = dotenv_values(path)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError(f"Keys without a value in {path}: {', '.join(missing)}")
    return {key: value for key, value in values.items()}


def merge_settings(
    defaults: Mapping[str, object],
    file_values: Optional[Mapping[str, object]] = None,
    cli_values: Optional[Mapping[str, object]] = None,
) -> Dict[str, object]:
    """
    Merge settings with precedence defaults < config file < CLI flags.

    CLI values that are ``None`` count as "not given".

    Raises:
        ConfigError: If the config file or CLI names a key the defaults do not know
    """
    merged = dict(defaults)
    for source_name, source in (("config file", file_values), ("command line", cli_values)):
        if not source:
            continue
        for key, value in source.items():
            if key not in defaults:
                raise ConfigError(f"Unknown setting {key!r} in {source_name}")
            if value is not None:
                merged[key] = value
    return merged
