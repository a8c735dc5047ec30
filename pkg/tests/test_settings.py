"""
Tests for the numerical settings layer.
"""

import json

import pytest

from mfsmp.settings import (
    SETTING_SPECS,
    SettingSpec,
    get_setting,
    get_settings,
    get_status,
    override_settings,
    reset_settings,
    resolve,
)


class TestDefaults:
    """Built-in defaults and the shipped settings file"""

    def test_every_setting_has_a_value(self):
        """Every declared setting resolves"""
        values = get_settings()
        assert set(values) == set(SETTING_SPECS)

    def test_shipped_file_matches_declared_defaults(self):
        """The packaged JSON file does not change any default"""
        for name, spec in SETTING_SPECS.items():
            assert get_setting(name) == spec.default

    def test_unknown_setting(self):
        """Unknown names raise KeyError"""
        with pytest.raises(KeyError):
            get_setting("no_such_setting")

    def test_resolve_prefers_explicit_value(self):
        """resolve falls back to the setting only for None"""
        assert resolve("basis_order", 5) == 5
        assert resolve("basis_order", None) == SETTING_SPECS["basis_order"].default


class TestOverrides:
    """Scoped overrides"""

    def test_override_restores(self):
        """Values and sources come back after the block"""
        before = get_status()["settings"]["basis_order"]["source"]
        with override_settings(basis_order=4, fd_step="1e-4"):
            assert get_setting("basis_order") == 4
            assert get_setting("fd_step") == pytest.approx(1e-4)
            assert "basis_order" in get_status()["overridden"]
        assert get_setting("basis_order") == 2
        assert get_status()["settings"]["basis_order"]["source"] == before

    def test_override_restores_after_error(self):
        """An exception inside the block still restores"""
        with pytest.raises(RuntimeError):
            with override_settings(threads=3):
                raise RuntimeError("boom")
        assert get_setting("threads") == 1

    def test_override_rejects_unknown(self):
        """Unknown names are rejected before anything changes"""
        with pytest.raises(KeyError):
            with override_settings(bogus=1):
                pass

    def test_override_rejects_below_minimum(self):
        """Values below the declared minimum are rejected"""
        with pytest.raises(ValueError):
            with override_settings(threads=0):
                pass
        assert get_setting("threads") == 1


class TestEnvironmentAndFile:
    """MFSMP_<NAME> variables and MFSMP_SETTINGS_FILE"""

    def test_env_override(self, monkeypatch):
        """Environment values are parsed with the declared type"""
        monkeypatch.setenv("MFSMP_BASIS_ORDER", "4")
        monkeypatch.setenv("MFSMP_SLOW_STAGE_MS", "250")
        reset_settings()
        assert get_setting("basis_order") == 4
        assert get_setting("slow_stage_ms") == 250.0
        assert get_status()["settings"]["basis_order"]["source"] == "env"

    def test_invalid_env_ignored(self, monkeypatch):
        """Unparseable environment values keep the previous layer"""
        monkeypatch.setenv("MFSMP_THREADS", "many")
        reset_settings()
        assert get_setting("threads") == 1

    def test_settings_file(self, monkeypatch, tmp_path):
        """A custom settings file overrides defaults; unknown keys are skipped"""
        path = tmp_path / "settings.json"
        path.write_text(json.dumps({"settings": {"fd_step": 1e-4, "bogus": 1, "threads": -2}}))
        monkeypatch.setenv("MFSMP_SETTINGS_FILE", str(path))
        reset_settings()
        assert get_setting("fd_step") == pytest.approx(1e-4)
        assert get_setting("threads") == 1
        assert get_status()["settings"]["fd_step"]["source"] == "file"

    def test_env_beats_file(self, monkeypatch, tmp_path):
        """Environment is the last layer"""
        path = tmp_path / "settings.json"
        path.write_text(json.dumps({"settings": {"basis_order": 3}}))
        monkeypatch.setenv("MFSMP_SETTINGS_FILE", str(path))
        monkeypatch.setenv("MFSMP_BASIS_ORDER", "1")
        reset_settings()
        assert get_setting("basis_order") == 1


class TestSettingSpec:
    """Typed coercion"""

    def test_boolean_strings(self):
        spec = SettingSpec("flag", False, bool)
        assert spec.coerce("yes") is True
        assert spec.coerce("off") is False
        with pytest.raises(ValueError):
            spec.coerce("maybe")

    def test_minimum(self):
        spec = SettingSpec("count", 1, int, 1)
        assert spec.coerce("3") == 3
        with pytest.raises(ValueError):
            spec.coerce(0)
