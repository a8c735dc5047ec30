"""
Numerical settings for mfsmp solvers and checks.

Settings come from three layers, later layers overriding earlier ones:
built-in defaults, the JSON file shipped with the package (or the file named
by MFSMP_SETTINGS_FILE), and MFSMP_<NAME> environment variables.
"""

import json
import logging
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Dict, Iterator, Optional

logger = logging.getLogger(__name__)

_DEFAULT_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "default_settings.json")


@dataclass
class SettingSpec:
    """Declaration of a single numerical setting."""

    name: str
    default: Any
    kind: type
    minimum: Optional[float] = None
    description: str = ""

    def coerce(self, raw: Any) -> Any:
        if self.kind is bool:
            if isinstance(raw, str):
                lowered = raw.strip().lower()
                if lowered in ("true", "1", "yes", "on"):
                    return True
                if lowered in ("false", "0", "no", "off"):
                    return False
                raise ValueError(f"not a boolean: {raw!r}")
            return bool(raw)
        value = self.kind(raw)
        if self.minimum is not None and value < self.minimum:
            raise ValueError(f"{self.name} must be >= {self.minimum}, got {value}")
        return value


SETTING_SPECS: Dict[str, SettingSpec] = {
    spec.name: spec
    for spec in (
        SettingSpec("basis_order", 2, int, 0, "polynomial degree of the LSMC regression basis"),
        SettingSpec("fd_step", 1e-5, float, 0.0, "central finite-difference step for derivative checks"),
        SettingSpec("derivative_tolerance", 1e-6, float, 0.0, "relative tolerance of derivative checks"),
        SettingSpec("validation_box", 3.0, float, 0.0, "half-width of the (x, y) sampling box"),
        SettingSpec("riccati_substeps", 4, int, 1, "RK4 substeps per grid step"),
        SettingSpec("riccati_bound", 1e8, float, 0.0, "blow-up bound on |eta|"),
        SettingSpec("volterra_max_iterations", 500, int, 1, "fixed-point iterations for the Volterra solver"),
        SettingSpec("volterra_tolerance", 1e-10, float, 0.0, "sup-norm tolerance of the Volterra iteration"),
        SettingSpec("feedback_sweeps", 2, int, 1, "fixed-point sweeps for adjoint-driven feedback"),
        SettingSpec("concavity_samples", 200, int, 1, "sampled points for the concavity check"),
        SettingSpec("concavity_step", 1e-3, float, 0.0, "second-difference step for sampled Hessians"),
        SettingSpec("concavity_tolerance", 1e-6, float, 0.0, "largest admissible Hessian eigenvalue"),
        SettingSpec("second_order_tolerance", 1e-8, float, 0.0, "spread allowed for deterministic coefficient fields"),
        SettingSpec("enumeration_guard", 1_000_000, int, 1, "maximum number of brute-force controls"),
        SettingSpec("control_grid_points", 41, int, 1, "points of the default A1 discretization"),
        SettingSpec("slow_stage_ms", 60_000.0, float, 0.0, "stages slower than this log a warning"),
        SettingSpec("threads", 1, int, 1, "worker threads for noise generation and enumeration"),
    )
}


class SettingsManager:
    """
    Holds the active numerical settings.

    Features:
    - Environment variable configuration
    - JSON settings file
    - Scoped overrides for tests and single runs
    """

    def __init__(self):
        self._values: Dict[str, Any] = {}
        self._sources: Dict[str, str] = {}
        self._lock = threading.RLock()
        self._load_config()

    def _load_config(self):
        """Load defaults, then the settings file, then environment overrides."""
        with self._lock:
            self._values = {name: spec.default for name, spec in SETTING_SPECS.items()}
            self._sources = {name: "default" for name in SETTING_SPECS}

        settings_file = os.environ.get("MFSMP_SETTINGS_FILE", _DEFAULT_FILE)
        if settings_file and os.path.exists(settings_file):
            self._load_config_file(settings_file)
        elif settings_file != _DEFAULT_FILE:
            logger.warning(f"Settings file not found: {settings_file}")

        self._load_env_overrides()

    def _load_env_overrides(self):
        """Load MFSMP_<NAME> overrides from the environment."""
        for name, spec in SETTING_SPECS.items():
            env_key = f"MFSMP_{name.upper()}"
            env_value = os.environ.get(env_key)
            if env_value is None:
                continue
            try:
                value = spec.coerce(env_value)
            except (TypeError, ValueError) as e:
                logger.warning(f"Invalid value for {env_key}: {env_value} ({e})")
                continue
            with self._lock:
                self._values[name] = value
                self._sources[name] = "env"

    def _load_config_file(self, settings_file: str):
        """Load settings from a JSON file."""
        try:
            with open(settings_file) as f:
                config = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning(f"Failed to load settings from {settings_file}: {e}")
            return

        for name, raw in config.get("settings", {}).items():
            spec = SETTING_SPECS.get(name)
            if spec is None:
                logger.warning(f"Unknown setting '{name}' in {settings_file}")
                continue
            try:
                value = spec.coerce(raw)
            except (TypeError, ValueError) as e:
                logger.warning(f"Invalid value for setting '{name}' in {settings_file}: {e}")
                continue
            with self._lock:
                self._values[name] = value
                self._sources[name] = "file"

    def get(self, name: str) -> Any:
        """Current value of a setting."""
        with self._lock:
            if name not in self._values:
                raise KeyError(f"unknown setting: {name}")
            return self._values[name]

    def set(self, name: str, value: Any, source: str = "override"):
        """Set a setting, validating it against its declaration."""
        spec = SETTING_SPECS.get(name)
        if spec is None:
            raise KeyError(f"unknown setting: {name}")
        coerced = spec.coerce(value)
        with self._lock:
            self._values[name] = coerced
            self._sources[name] = source

    @contextmanager
    def override(self, **values: Any) -> Iterator[None]:
        """Temporarily override settings inside a ``with`` block."""
        unknown = sorted(set(values) - set(SETTING_SPECS))
        if unknown:
            raise KeyError(f"unknown settings: {unknown}")
        with self._lock:
            saved = {name: (self._values[name], self._sources[name]) for name in values}
        try:
            for name, value in values.items():
                self.set(name, value)
            yield
        finally:
            with self._lock:
                for name, (value, source) in saved.items():
                    self._values[name] = value
                    self._sources[name] = source

    def get_status(self) -> Dict[str, Any]:
        """Values and their sources."""
        with self._lock:
            return {
                "settings": {
                    name: {"value": self._values[name], "source": self._sources[name]}
                    for name in SETTING_SPECS
                },
                "overridden": sorted(
                    name for name, source in self._sources.items() if source != "default"
                ),
            }

    def reset(self):
        """Reload from defaults, file and environment."""
        self._load_config()


# Global instance
_settings_manager = SettingsManager()


def get_setting(name: str) -> Any:
    """Current value of a setting."""
    return _settings_manager.get(name)


def resolve(name: str, value: Any) -> Any:
    """Return ``value`` unless it is None, in which case the active setting."""
    return _settings_manager.get(name) if value is None else value


def get_settings() -> Dict[str, Any]:
    """All current values."""
    return {name: entry["value"] for name, entry in get_status()["settings"].items()}


def override_settings(**values: Any):
    """Scoped override context manager."""
    return _settings_manager.override(**values)


def get_status() -> Dict[str, Any]:
    """Values and their sources."""
    return _settings_manager.get_status()


def reset_settings():
    """Reload settings from defaults, file and environment."""
    _settings_manager.reset()
