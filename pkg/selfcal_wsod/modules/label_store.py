"""
SELFCAL-WSOD — Module 5a: Pseudo-label store

On-disk layout of one store directory:

    store.json          StoreMeta (pipeline, threshold, checkpoint hash, entries)
    Y1/<stem>.png       stage-1 labels, written once by generate_pseudo_labels
    current.npz         latest blended label per touched image + epoch tag
    Y_epoch<n>/         PNG snapshot of the current labels after epoch n

Y1 is read-only for the lifetime of the store; stage 2 only ever writes
`current.npz` and the epoch snapshots.
"""

import io
import json
import logging
import re
import shutil
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from pydantic import ValidationError

from selfcal_wsod.core.errors import CalibrationError
from selfcal_wsod.modules.datasets import load_mask, save_map
from selfcal_wsod.schemas.models import StoreMeta
from selfcal_wsod.services.checkpoint_service import tree_hash

logger = logging.getLogger(__name__)

_EPOCH_TAG = "__epoch_tag__"
_SNAPSHOT_RE = re.compile(r"^Y_epoch(\d+)$")


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """np.savez with a fixed member timestamp, so equal states give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name], allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


class PseudoLabelStore:
    Y1_DIR = "Y1"
    META_FILE = "store.json"
    STATE_FILE = "current.npz"

    def __init__(self, root: str | Path, meta: StoreMeta):
        self.root = Path(root)
        self.meta = meta
        self.epoch_tag = 0
        self._current: dict[str, np.ndarray] = {}
        self._original_cache: dict[tuple[str, Optional[int]], np.ndarray] = {}

    # ─────────────────────────────────────────────────────────
    # CONSTRUCTION
    # ─────────────────────────────────────────────────────────

    @classmethod
    def create(cls, root: str | Path, meta: StoreMeta) -> "PseudoLabelStore":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / cls.META_FILE).write_text(
            json.dumps(meta.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        return cls(root, meta)

    @classmethod
    def open(cls, root: str | Path) -> "PseudoLabelStore":
        root = Path(root)
        meta_path = root / cls.META_FILE
        if not meta_path.is_file():
            raise CalibrationError(f"Pseudo-label store not found: {root}", code="STORE_NOT_FOUND")
        try:
            meta = StoreMeta.model_validate_json(meta_path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise CalibrationError(f"Invalid {meta_path}: {e}", code="STORE_INVALID") from e
        store = cls(root, meta)
        if (root / cls.STATE_FILE).is_file():
            store.load_state()
        return store

    # ─────────────────────────────────────────────────────────
    # ORIGINAL LABELS (Y1)
    # ─────────────────────────────────────────────────────────

    @property
    def stems(self) -> list[str]:
        return list(self.meta.entries)

    def __len__(self) -> int:
        return len(self.meta.entries)

    def __contains__(self, stem: str) -> bool:
        return stem in self.meta.entries

    def original_path(self, stem: str) -> Path:
        return self.root / self.Y1_DIR / f"{stem}.png"

    def original(self, stem: str, size: Optional[int] = None) -> np.ndarray:
        """Y1 for one image, optionally bilinearly resized to size×size. Read-only."""
        key = (stem, size)
        if key not in self._original_cache:
            if stem not in self:
                raise CalibrationError(f"No pseudo label for {stem}", code="LABEL_NOT_FOUND")
            values = load_mask(self.original_path(stem), None if size is None else (size, size))
            values.setflags(write=False)
            self._original_cache[key] = values
        return self._original_cache[key]

    def original_batch(self, stems: list[str], size: int) -> torch.Tensor:
        """B×1×size×size tensor of Y1 labels."""
        return torch.from_numpy(np.stack([self.original(s, size) for s in stems]))[:, None]

    def original_hash(self) -> str:
        return tree_hash(self.root / self.Y1_DIR, "*.png")

    # ─────────────────────────────────────────────────────────
    # CURRENT LABELS (Yn)
    # ─────────────────────────────────────────────────────────

    def current(self, stem: str) -> np.ndarray:
        """Latest blended label; Y1 for images no calibration step has touched yet."""
        if stem in self._current:
            return self._current[stem]
        return self.original(stem)

    def set_current(self, stem: str, values: np.ndarray) -> None:
        if stem not in self:
            raise CalibrationError(f"No pseudo label for {stem}", code="LABEL_NOT_FOUND")
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 2:
            raise CalibrationError(f"Label for {stem} must be H×W, got {values.shape}", code="SHAPE_MISMATCH")
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise CalibrationError(f"Label for {stem} leaves [0,1]", code="LABEL_OUT_OF_RANGE")
        self._current[stem] = values.copy()

    @property
    def touched(self) -> list[str]:
        return sorted(self._current)

    # ─────────────────────────────────────────────────────────
    # PERSISTENCE
    # ─────────────────────────────────────────────────────────

    def save_state(self) -> Path:
        path = self.root / self.STATE_FILE
        arrays = dict(self._current)
        arrays[_EPOCH_TAG] = np.asarray(self.epoch_tag, dtype=np.int64)
        _write_npz(path, arrays)
        return path

    def load_state(self) -> None:
        path = self.root / self.STATE_FILE
        try:
            with np.load(path, allow_pickle=False) as data:
                self.epoch_tag = int(data[_EPOCH_TAG]) if _EPOCH_TAG in data.files else 0
                self._current = {
                    name: data[name].astype(np.float32)
                    for name in data.files if name != _EPOCH_TAG
                }
        except (OSError, ValueError, zipfile.BadZipFile) as e:
            raise CalibrationError(f"Cannot read store state {path}: {e}", code="STORE_INVALID") from e

    def reset_state(self) -> None:
        """Drop every stage-2 artifact; Y1 and store.json stay."""
        self._current.clear()
        self.epoch_tag = 0
        (self.root / self.STATE_FILE).unlink(missing_ok=True)
        for _, directory in self.snapshots():
            shutil.rmtree(directory)

    def clone(self, root: str | Path) -> "PseudoLabelStore":
        """Copy Y1 and store.json into a fresh store without any stage-2 state."""
        root = Path(root)
        if root.exists():
            shutil.rmtree(root)
        shutil.copytree(self.root / self.Y1_DIR, root / self.Y1_DIR)
        return PseudoLabelStore.create(root, self.meta)

    def snapshot(self, epoch: int) -> Path:
        """Write the current labels of every touched image to Y_epoch<epoch>/."""
        directory = self.root / f"Y_epoch{epoch}"
        directory.mkdir(parents=True, exist_ok=True)
        for stem in self.touched:
            save_map(self._current[stem], directory / f"{stem}.png")
        return directory

    def snapshots(self) -> list[tuple[int, Path]]:
        found = []
        for path in self.root.iterdir() if self.root.is_dir() else []:
            match = _SNAPSHOT_RE.match(path.name)
            if match and path.is_dir():
                found.append((int(match.group(1)), path))
        return sorted(found)
