"""
SELFCAL-WSOD: Run Metadata
===========================
Every subcommand records how its outputs were produced, next to the outputs:

    resolved_config.yaml   the fully-resolved RunConfig (preset → file → flags)
    run.json               command, preset, seed, config hash, manifest hash, version
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Optional

import yaml

from selfcal_wsod.core.config import settings
from selfcal_wsod.schemas.models import RunConfig
from selfcal_wsod.services.checkpoint_service import file_hash

logger = logging.getLogger(__name__)

CONFIG_FILE = "resolved_config.yaml"
RUN_FILE = "run.json"


def config_hash(config: RunConfig) -> str:
    blob = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def manifest_hash(path: str | Path) -> str:
    """Git-style blob hash of the manifest file."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_run_metadata(out_dir: str | Path, config: RunConfig, command: str,
                       manifest: Optional[str | Path] = None,
                       extra: Optional[dict[str, Any]] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_FILE).write_text(
        yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True),
        encoding="utf-8",
    )
    record: dict[str, Any] = {
        "command": command,
        "preset": config.preset.value,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "version": settings.app_version,
    }
    if manifest is not None and Path(manifest).is_file():
        record["manifest"] = str(manifest)
        record["manifest_hash"] = manifest_hash(manifest)
        record["manifest_sha256"] = file_hash(manifest)
    record.update(extra or {})
    path = out_dir / RUN_FILE
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug(f"Run metadata written: {path}")
    return path
