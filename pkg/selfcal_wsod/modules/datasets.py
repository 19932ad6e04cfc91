"""
SELFCAL-WSOD — Module 1: Datasets
Manifest CSV parsing, image/mask IO and the torch Dataset wrapper shared by both
training stages.

Manifest CSV (UTF-8, comma separated, paths relative to the manifest file):
    image_path,category_id,label_path
    images/train_0000.png,0,masks/train_0000.png
    images/train_0001.png,,            ← empty cells mean "absent"

`dataset.json` next to a manifest may record `num_categories`, `categories` and
`"synthetic": true` (written by the synthetic generator).
"""

import csv
import io
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError
from torch.utils.data import Dataset

from selfcal_wsod.core.errors import DatasetError
from selfcal_wsod.schemas.models import DatasetManifest, ManifestEntry

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["image_path", "category_id", "label_path"]
DATASET_INFO_FILE = "dataset.json"


# ─────────────────────────────────────────────────────────────
# MANIFESTS
# ─────────────────────────────────────────────────────────────

def load_dataset_info(directory: str | Path) -> dict:
    """Read `dataset.json` from a dataset directory; {} when absent."""
    info_path = Path(directory) / DATASET_INFO_FILE
    if not info_path.is_file():
        return {}
    try:
        return json.loads(info_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"{info_path}: invalid JSON ({e})", code="DATASET_INFO_INVALID") from e


def is_synthetic(manifest_path: str | Path) -> bool:
    return bool(load_dataset_info(Path(manifest_path).parent).get("synthetic", False))


def load_manifest(
    path: str | Path,
    num_categories: Optional[int] = None,
    split_name: Optional[str] = None,
) -> DatasetManifest:
    """Parse and validate a manifest CSV.

    num_categories: explicit K; else `dataset.json`; else max(category_id)+1.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"Manifest not found: {path}", code="MANIFEST_NOT_FOUND")

    text = path.read_bytes().decode("utf-8-sig")
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise DatasetError(f"{path}: empty manifest", code="MANIFEST_EMPTY")
    header = [h.strip() for h in reader.fieldnames]
    if "image_path" not in header:
        raise DatasetError(f"{path}: header must start with {','.join(MANIFEST_COLUMNS)}",
                           code="MANIFEST_MALFORMED")

    entries: list[ManifestEntry] = []
    for line_no, raw in enumerate(reader, start=2):
        if None in raw:
            raise DatasetError(f"{path}:{line_no}: too many columns", code="MANIFEST_MALFORMED")
        row = {k.strip(): (v or "").strip() for k, v in raw.items()}
        if not row.get("image_path"):
            raise DatasetError(f"{path}:{line_no}: malformed row", code="MANIFEST_MALFORMED")
        raw_id = row.get("category_id", "")
        try:
            category_id = int(raw_id) if raw_id else None
        except ValueError:
            raise DatasetError(f"{path}:{line_no}: category_id {raw_id!r} is not an integer",
                               code="MANIFEST_MALFORMED")
        if category_id is not None and category_id < 0:
            raise DatasetError(f"{path}:{line_no}: negative category_id", code="MANIFEST_MALFORMED")
        entries.append(ManifestEntry(
            image_path=row["image_path"],
            category_id=category_id,
            label_path=row.get("label_path") or None,
        ))

    if not entries:
        raise DatasetError(f"{path}: empty manifest", code="MANIFEST_EMPTY")

    if num_categories is None:
        num_categories = load_dataset_info(path.parent).get("num_categories")
    if num_categories is None:
        ids = [e.category_id for e in entries if e.category_id is not None]
        num_categories = max(ids) + 1 if ids else 1

    seen: set[str] = set()
    for e in entries:
        if e.image_path in seen:
            raise DatasetError(f"{path}: duplicate image_path {e.image_path}", code="DUPLICATE_IMAGE")
        seen.add(e.image_path)
        if e.category_id is not None and e.category_id >= num_categories:
            raise DatasetError(
                f"{path}: category out of range ({e.category_id} >= {num_categories})",
                code="CATEGORY_OUT_OF_RANGE",
            )

    try:
        manifest = DatasetManifest(
            entries=entries,
            num_categories=num_categories,
            split_name=split_name or path.stem,
            root=str(path.parent),
        )
    except ValidationError as e:
        raise DatasetError(f"{path}: {e.errors()[0]['msg']}", code="MANIFEST_INVALID") from e
    logger.debug(f"Loaded manifest {path} ({len(entries)} entries, K={num_categories})")
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow([
                e.image_path,
                "" if e.category_id is None else e.category_id,
                e.label_path or "",
            ])
    return path


# ─────────────────────────────────────────────────────────────
# IMAGES & MASKS
# ─────────────────────────────────────────────────────────────

def _open(path: str | Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise DatasetError(f"Image not found: {path}", code="IMAGE_NOT_FOUND")
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"Cannot decode image {path}: {e}", code="IMAGE_UNDECODABLE") from e
    if img.width == 0 or img.height == 0:
        raise DatasetError(f"Zero-sized image: {path}", code="IMAGE_EMPTY")
    return img


def load_image(path: str | Path, target_size: Optional[int] = None) -> np.ndarray:
    """Load an RGB image as H×W×3 float32 in [0,1], bilinearly resized to a square.

    Grayscale is replicated to 3 channels, alpha is dropped.
    """
    img = _open(path).convert("RGB")
    if target_size is not None and img.size != (target_size, target_size):
        img = img.resize((target_size, target_size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def load_mask(path: str | Path, size: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Load a single-channel map as H×W float32 in [0,1]; `size` is (height, width)."""
    img = _open(path).convert("L")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if size is not None and arr.shape != tuple(size):
        resized = Image.fromarray(arr).resize((size[1], size[0]), Image.BILINEAR)
        arr = np.clip(np.asarray(resized, dtype=np.float32), 0.0, 1.0)
    return arr


def save_map(values: np.ndarray, path: str | Path) -> Path:
    """Write an H×W map in [0,1] as an 8-bit grayscale PNG (255 = foreground)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8)).save(path, format="PNG")
    return path


def save_image(pixels: np.ndarray, path: str | Path) -> Path:
    """Write an H×W×3 image in [0,1] as an 8-bit RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")
    return path


# ─────────────────────────────────────────────────────────────
# TORCH DATASET
# ─────────────────────────────────────────────────────────────

class ManifestImageDataset(Dataset):
    """Yields (image 3×S×S, category id or -1, index) for one manifest.

    Only RGB images are read; `label_path` is never touched here.
    """

    def __init__(self, manifest: DatasetManifest, input_size: int):
        self.manifest = manifest
        self.input_size = input_size

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def __getitem__(self, index: int):
        entry = self.manifest.entries[index]
        pixels = load_image(self.manifest.resolve(entry.image_path), self.input_size)
        image = torch.from_numpy(pixels).permute(2, 0, 1).contiguous()
        category = -1 if entry.category_id is None else entry.category_id
        return image, category, index
