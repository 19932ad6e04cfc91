"""
SELFCAL-WSOD Core Configuration
Environment settings, preset registry and run-config resolution.

Resolution order for a run: preset defaults → YAML file (--config) → CLI flags.
"""

from __future__ import annotations

import copy
import logging
from pathlib import Path
from typing import Any, Optional

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from selfcal_wsod.core.errors import ConfigError
from selfcal_wsod.schemas.models import Preset, RunConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    app_name: str = "SELFCAL-WSOD"
    app_version: str = "1.0.0"
    debug: bool = False
    device: str = "cpu"
    cache: Optional[str] = None  # SELFCAL_WSOD_CACHE: directory or redis:// URL
    num_workers: int = 0
    progress: bool = True

    model_config = SettingsConfigDict(
        env_prefix="SELFCAL_WSOD_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


settings = Settings()


# ─────────────────────────────────────────────────────────────
# PRESET REGISTRY
# "paper": implementation details of the reference setup (DenseNet-169,
#          Adam, 1e-4/20 epochs then 3e-6/25 epochs, batch 20, 256×256, λ=0.6)
# "tiny":  desk-scale defaults for the synthetic shapes benchmark
# ─────────────────────────────────────────────────────────────

PRESETS: dict[Preset, dict[str, Any]] = {
    Preset.PAPER: {
        "classifier": {
            "backbone": "densenet169", "pretrained": True,
            "lr": 1e-4, "max_epochs": 20, "batch_size": 20, "input_size": 256,
        },
        "saliency": {
            "backbone": "densenet169", "pretrained": True,
            "lr": 3e-6, "max_epochs": 25, "batch_size": 20, "input_size": 256,
            "lambda_policy": {"mode": "fixed", "fixed_value": 0.6},
            "binarize_threshold": 0.4,
        },
        "pseudo": {"scales": [0.5, 1.0, 1.5, 2.0], "threshold": 0.4},
        "decoder": {"mid_channels": 64},
    },
    Preset.TINY: {
        "classifier": {
            "backbone": "tiny", "pretrained": False,
            "lr": 1e-3, "max_epochs": 20, "batch_size": 20, "input_size": 128,
        },
        "saliency": {
            "backbone": "tiny", "pretrained": False,
            "lr": 1e-3, "max_epochs": 8, "batch_size": 10, "input_size": 64,
            "lambda_policy": {"mode": "fixed", "fixed_value": 0.6},
            "binarize_threshold": 0.4,
        },
        "pseudo": {"scales": [0.5, 1.0, 1.5, 2.0], "threshold": 0.4},
        "decoder": {"mid_channels": 32},
    },
}

# Keys the paper preset refuses to override. The λ policy is not among them.
PAPER_LOCKED_KEYS = [
    "classifier.backbone", "classifier.lr", "classifier.max_epochs",
    "classifier.batch_size", "classifier.input_size",
    "saliency.backbone", "saliency.lr", "saliency.max_epochs",
    "saliency.batch_size", "saliency.input_size", "saliency.binarize_threshold",
    "decoder.mid_channels",
]


def get_preset(preset: Preset | str) -> dict[str, Any]:
    """Deep copy of a preset's defaults."""
    try:
        key = Preset(preset)
    except ValueError:
        raise ConfigError(f"Unknown preset: {preset}", code="UNKNOWN_PRESET")
    return copy.deepcopy(PRESETS[key])


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _set_dotted(target: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = target
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _get_dotted(source: dict, dotted: str) -> Any:
    node: Any = source
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def _normalize_aliases(data: dict[str, Any]) -> dict[str, Any]:
    """Config files may spell `saliency.lambda_policy` as `saliency.lambda`."""
    saliency = data.get("saliency")
    if isinstance(saliency, dict) and "lambda" in saliency:
        saliency = dict(saliency)
        saliency["lambda_policy"] = saliency.pop("lambda")
        data = {**data, "saliency": saliency}
    return data


def load_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}", code="CONFIG_NOT_FOUND")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file is not valid YAML: {e}", code="CONFIG_INVALID") from e
    if not isinstance(data, dict):
        raise ConfigError("Config file must contain a mapping", code="CONFIG_INVALID")
    return _normalize_aliases(data)


def resolve_run_config(
    preset: Preset | str | None = None,
    config_file: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> RunConfig:
    """Build the fully-resolved RunConfig for one invocation.

    `overrides` uses dotted keys ("saliency.lambda_policy", "seed", ...).
    """
    file_data = load_config_file(config_file) if config_file else {}
    name = preset or file_data.get("preset") or Preset.TINY.value
    defaults = get_preset(name)
    chosen = Preset(name)

    merged = _deep_merge(defaults, file_data)
    merged["preset"] = chosen.value
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(merged, dotted, value)

    if chosen == Preset.PAPER:
        defaults = PRESETS[Preset.PAPER]
        for key in PAPER_LOCKED_KEYS:
            expected = _get_dotted(defaults, key)
            actual = _get_dotted(merged, key)
            if actual != expected:
                raise ConfigError(
                    f"--preset paper locks {key}={expected!r} (got {actual!r})",
                    code="PRESET_LOCKED",
                )

    try:
        config = RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}", code="CONFIG_INVALID") from e
    logger.debug(f"Resolved config: preset={config.preset.value}, seed={config.seed}")
    return config
