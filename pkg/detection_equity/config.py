"""YAML configuration loader.

Every tunable default lives in config.yaml at the repository root.
Functions read it through ``setting`` and let explicit arguments win.
"""

from pathlib import Path

import yaml

from detection_equity.errors import ValidationError


_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config.yaml"
_config: dict | None = None


def load_config() -> dict:
    """Load and cache config.yaml (an empty dict if the file is absent)."""
    global _config
    if _config is None:
        if not _CONFIG_PATH.exists():
            _config = {}
            return _config
        try:
            with open(_CONFIG_PATH, encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ValidationError(f"{_CONFIG_PATH.name}: {e}") from None
        if not isinstance(loaded, dict):
            raise ValidationError(f"{_CONFIG_PATH.name} must hold a mapping of sections")
        _config = loaded
    return _config


def get(key: str, default=None):
    """Get a top-level config value."""
    return load_config().get(key, default)


def section(name: str) -> dict:
    """A config section as a dict; missing sections are empty."""
    value = get(name) or {}
    if not isinstance(value, dict):
        raise ValidationError(f"config section {name!r} must be a mapping")
    return value


def setting(section_name: str, key: str, default=None):
    """Get ``section.key``, falling back to ``default`` when unset or null."""
    value = section(section_name).get(key)
    return default if value is None else value
