#!/usr/bin/env python3
"""
Pruebas del gestor de ajustes: prioridad de fuentes y valores tipados
"""

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

import pytest

from errors import ConfigError
from settings_manager import DEFAULTS, SettingsManager


def test_defaults_without_sources(tmp_path, monkeypatch):
    for key in DEFAULTS:
        monkeypatch.delenv(key, raising=False)
    settings = SettingsManager(env_file=tmp_path / "missing.env")
    assert not settings.env_file_loaded
    assert settings.snapshot() == DEFAULTS
    assert settings.get_int("IMDN_WORKERS") == 4


def test_priority_override_then_environment_then_dotenv(tmp_path, monkeypatch):
    # load_dotenv escribe en os.environ; setenv + delenv deja que monkeypatch lo restaure
    monkeypatch.setenv("IMDN_SEED", "0")
    monkeypatch.delenv("IMDN_SEED")
    monkeypatch.delenv("IMDN_OUTPUT_DIR", raising=False)
    monkeypatch.setenv("IMDN_WORKERS", "2")
    env_file = tmp_path / ".env"
    env_file.write_text("IMDN_WORKERS=8\nIMDN_SEED=5\n", encoding="utf-8")

    settings = SettingsManager(env_file=env_file, overrides={"IMDN_OUTPUT_DIR": "out"})
    assert settings.env_file_loaded
    assert settings.get_int("IMDN_WORKERS") == 2
    assert settings.get_int("IMDN_SEED") == 5
    assert settings.get_setting("IMDN_OUTPUT_DIR") == "out"


def test_typed_accessors(tmp_path, monkeypatch):
    monkeypatch.setenv("IMDN_WORKERS", "many")
    settings = SettingsManager(env_file=tmp_path / "missing.env", overrides={"IMDN_SEED": 3})
    assert settings.get_int("IMDN_SEED") == 3
    assert settings.get_int("UNKNOWN_KEY", 7) == 7
    with pytest.raises(ConfigError):
        settings.get_int("IMDN_WORKERS")
