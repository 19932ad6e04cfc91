"""
SELFCAL-WSOD: Checkpoint Service
=================================
One binary torch file per checkpoint plus a JSON sidecar with the same stem:

    classifier.pt    {"state_dict": ..., optional "optimizer"/"rng"/"epoch"}
    classifier.json  {"role", "backbone", "num_categories", "epoch", "seed", "input_size", ...}

Also provides the content hashes used by run metadata and store.json.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any

import torch
from pydantic import ValidationError

from selfcal_wsod.core.errors import CheckpointError
from selfcal_wsod.schemas.models import CheckpointMeta

logger = logging.getLogger(__name__)


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(state_dict: dict, meta: CheckpointMeta, path: str | Path,
                    extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"state_dict": state_dict}
    payload.update(extra or {})
    torch.save(payload, path)
    sidecar_path(path).write_text(
        json.dumps(meta.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8",
    )
    logger.debug(f"Checkpoint written: {path} (role={meta.role.value}, epoch={meta.epoch})")
    return path


def load_meta(path: str | Path) -> CheckpointMeta:
    side = sidecar_path(path)
    if not side.is_file():
        raise CheckpointError(f"Checkpoint sidecar missing: {side}", code="CHECKPOINT_SIDECAR_MISSING")
    try:
        return CheckpointMeta.model_validate_json(side.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CheckpointError(f"Invalid checkpoint sidecar {side}: {e}", code="CHECKPOINT_INVALID") from e


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], CheckpointMeta]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}", code="CHECKPOINT_NOT_FOUND")
    meta = load_meta(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}", code="CHECKPOINT_INVALID") from e
    return payload, meta


# ─────────────────────────────────────────────────────────────
# CONTENT HASHES
# ─────────────────────────────────────────────────────────────

def file_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def tree_hash(directory: str | Path, pattern: str = "**/*") -> str:
    """Hash of relative file names and contents under a directory, order independent."""
    directory = Path(directory)
    digest = hashlib.sha256()
    for path in sorted(p for p in directory.glob(pattern) if p.is_file()):
        digest.update(path.relative_to(directory).as_posix().encode("utf-8"))
        digest.update(file_hash(path).encode("ascii"))
    return digest.hexdigest()
