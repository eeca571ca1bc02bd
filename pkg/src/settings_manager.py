"""
Settings Manager for the IMDN engine
Resolves run defaults from explicit overrides, the environment and a .env file
"""

import os
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from errors import ConfigError

logger = logging.getLogger(__name__)


DEFAULTS: Dict[str, str] = {
    "IMDN_LOG_LEVEL": "INFO",
    "IMDN_WORKERS": "4",
    "IMDN_OUTPUT_DIR": "runs",
    "IMDN_SEED": "0",
}


class SettingsManager:
    """
    Manages settings from multiple sources:
    1. Explicit overrides (CLI flags)
    2. Environment variables
    3. .env file at the repository root
    4. Built-in defaults
    """

    def __init__(self, env_file: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None):
        """
        Initialize SettingsManager

        Args:
            env_file: Path to a .env file (default: <repo>/.env)
            overrides: Values that win over every other source
        """
        self.overrides: Dict[str, str] = {k: str(v) for k, v in (overrides or {}).items()}
        self.settings_cache: Dict[str, Optional[str]] = {}

        env_path = env_file or Path(__file__).parent.parent / ".env"
        self.env_file_loaded = False
        if env_path.exists():
            # override=False: the process environment keeps priority
            load_dotenv(env_path, override=False)
            self.env_file_loaded = True
            logger.info(f"Loaded .env file from {env_path}")

    def get_setting(self, key: str, default: Optional[str] = None) -> Optional[str]:
        """
        Get a setting (override > env vars > .env > default)

        Args:
            key: Setting key (e.g., 'IMDN_WORKERS')
            default: Default value if the key is not found

        Returns:
            Setting value or default
        """
        if key in self.overrides:
            return self.overrides[key]

        if key in self.settings_cache:
            return self.settings_cache[key]

        value = os.getenv(key)
        if value is None:
            value = default if default is not None else DEFAULTS.get(key)
            logger.debug(f"Using default for {key}")
        self.settings_cache[key] = value
        return value

    def get_int(self, key: str, default: Optional[int] = None) -> int:
        """Get an integer setting, raising ConfigError on malformed values"""
        raw = self.get_setting(key, None if default is None else str(default))
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"Setting {key} must be an integer, got {raw!r}")

    def snapshot(self) -> Dict[str, Optional[str]]:
        """All known settings with their resolved values (for the run manifest)"""
        return {key: self.get_setting(key) for key in DEFAULTS}


# Singleton instance
_settings_manager: Optional[SettingsManager] = None


def get_settings_manager(overrides: Optional[Dict[str, Any]] = None) -> SettingsManager:
    """
    Get or create the singleton SettingsManager instance

    Args:
        overrides: When given, a fresh manager with these overrides replaces the singleton

    Returns:
        SettingsManager instance
    """
    global _settings_manager

    if _settings_manager is None or overrides:
        _settings_manager = SettingsManager(overrides=overrides)

    return _settings_manager
