"""
Shared helpers for the subcommands: manifest loading with the preset guard and
the standard output locations under RunConfig.paths.
"""
import logging
from pathlib import Path
from typing import Optional

from selfcal_wsod.core.errors import ConfigError, DatasetError
from selfcal_wsod.modules.datasets import is_synthetic, load_manifest
from selfcal_wsod.schemas.models import DatasetManifest, Preset, RunConfig

logger = logging.getLogger(__name__)


def classifier_dir(config: RunConfig) -> Path:
    return Path(config.paths.checkpoints) / "classifier"


def saliency_dir(config: RunConfig) -> Path:
    return Path(config.paths.checkpoints) / "saliency"


def guard_preset_dataset(config: RunConfig, manifest_path: str | Path) -> None:
    """The paper preset never runs on the synthetic stand-in dataset."""
    if config.preset == Preset.PAPER and is_synthetic(manifest_path):
        raise ConfigError(
            f"--preset paper refuses the synthetic dataset at {Path(manifest_path).parent}; "
            f"use --preset tiny",
            code="PRESET_DATASET_MISMATCH",
        )


def open_manifest(config: RunConfig, path: Optional[str | Path], split_name: str) -> DatasetManifest:
    if not path:
        raise DatasetError(f"No {split_name} manifest configured", code="MANIFEST_NOT_FOUND")
    guard_preset_dataset(config, path)
    return load_manifest(path, split_name=split_name)
