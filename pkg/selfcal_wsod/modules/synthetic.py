"""
SELFCAL-WSOD — Module 1b: Synthetic Shapes
Seeded desk-scale stand-in for a saliency-based classification dataset.

Every image holds exactly one salient object whose shape family (and colour family)
is its class label, so the image-level label always matches the salient object.

Output layout:
    <out>/images/train_0000.png   RGB
    <out>/masks/train_0000.png    8-bit, 0 = background, 255 = foreground
    <out>/train.csv, test.csv     manifests
    <out>/dataset.json            categories, config, per-object geometry, synthetic marker
"""

import json
import logging
from pathlib import Path

import numpy as np

from selfcal_wsod.core.errors import DatasetError
from selfcal_wsod.modules.datasets import (
    DATASET_INFO_FILE, save_image, save_manifest, save_map,
)
from selfcal_wsod.schemas.models import (
    BackgroundMode, DatasetManifest, ManifestEntry, SyntheticConfig,
)

logger = logging.getLogger(__name__)

CATEGORIES = ["disk", "square", "triangle", "ring", "diamond", "cross"]

# One colour family per category: RGB base, jittered per image.
CATEGORY_COLORS = {
    "disk":     (0.88, 0.16, 0.14),
    "square":   (0.16, 0.74, 0.22),
    "triangle": (0.14, 0.26, 0.88),
    "ring":     (0.92, 0.80, 0.10),
    "diamond":  (0.80, 0.18, 0.80),
    "cross":    (0.10, 0.80, 0.82),
}

MIN_FOREGROUND = 0.05
MAX_FOREGROUND = 0.60
_MAX_ATTEMPTS = 200


def shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    """Analytic binary mask of one shape evaluated at integer pixel coordinates."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        m = dx ** 2 + dy ** 2 <= r ** 2
    elif shape == "square":
        s = 0.8 * r
        m = (np.abs(dx) <= s) & (np.abs(dy) <= s)
    elif shape == "triangle":
        # upward isosceles triangle inscribed in the circle of radius r
        ax, ay = cx, cy - r
        bx, by = cx - 0.866 * r, cy + 0.5 * r
        qx, qy = cx + 0.866 * r, cy + 0.5 * r

        def side(px, py, x1, y1, x2, y2):
            return (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)

        d1 = side(xx, yy, ax, ay, bx, by)
        d2 = side(xx, yy, bx, by, qx, qy)
        d3 = side(xx, yy, qx, qy, ax, ay)
        has_neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        has_pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        m = ~(has_neg & has_pos)
    elif shape == "ring":
        d2 = dx ** 2 + dy ** 2
        m = (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    elif shape == "diamond":
        m = np.abs(dx) + np.abs(dy) <= r
    elif shape == "cross":
        arm = r / 3.0
        m = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    else:
        raise DatasetError(f"Unknown shape family: {shape}", code="UNKNOWN_SHAPE")
    return m.astype(np.uint8)


def _background(rng: np.random.Generator, size: int, mode: BackgroundMode) -> np.ndarray:
    level = rng.uniform(0.35, 0.6)
    tint = rng.uniform(-0.03, 0.03, size=3)
    bg = np.ones((size, size, 3)) * (level + tint)
    if mode == BackgroundMode.TEXTURED:
        yy, xx = np.mgrid[0:size, 0:size] / size
        for _ in range(3):
            fx, fy = rng.uniform(1.0, 4.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            bg += 0.04 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)[..., None]
        # neutral distractor blobs, never part of the mask
        for _ in range(int(rng.integers(2, 5))):
            bx, by = rng.uniform(0, size, size=2)
            br = rng.uniform(size / 24, size / 12)
            blob = (xx * size - bx) ** 2 + (yy * size - by) ** 2 <= br ** 2
            bg[blob] = rng.uniform(0.2, 0.75)
        bg += rng.normal(0.0, 0.02, size=bg.shape)
    return np.clip(bg, 0.0, 1.0)


def _sample_object(rng: np.random.Generator, shape: str, size: int) -> tuple[np.ndarray, dict]:
    for _ in range(_MAX_ATTEMPTS):
        r = rng.uniform(0.14 * size, 0.36 * size)
        cx = rng.uniform(0.3 * size, 0.7 * size)
        cy = rng.uniform(0.3 * size, 0.7 * size)
        mask = shape_mask(shape, size, cx, cy, r)
        fraction = float(mask.mean())
        if MIN_FOREGROUND <= fraction <= MAX_FOREGROUND:
            return mask, {"shape": shape, "cx": cx, "cy": cy, "r": r, "foreground": fraction}
    raise DatasetError(f"Could not place a {shape} within the foreground bounds at size {size}",
                       code="SYNTHETIC_REJECTED")


def _render_split(config: SyntheticConfig, out_dir: Path, split: str,
                  count: int, stream: int) -> tuple[list[ManifestEntry], list[dict]]:
    rng = np.random.default_rng([config.seed, stream])
    shapes = CATEGORIES[: config.num_categories]
    entries: list[ManifestEntry] = []
    objects: list[dict] = []
    for i in range(count):
        category = i % config.num_categories
        shape = shapes[category]
        mask, geometry = _sample_object(rng, shape, config.image_size)
        image = _background(rng, config.image_size, config.background_mode)
        color = np.clip(np.array(CATEGORY_COLORS[shape]) + rng.uniform(-0.08, 0.08, size=3), 0, 1)
        fg = mask.astype(bool)
        image[fg] = np.clip(color + rng.normal(0.0, 0.02, size=(int(fg.sum()), 3)), 0.0, 1.0)

        name = f"{split}_{i:04d}.png"
        save_image(image, out_dir / "images" / name)
        save_map(mask.astype(np.float32), out_dir / "masks" / name)
        entries.append(ManifestEntry(
            image_path=f"images/{name}", category_id=category, label_path=f"masks/{name}",
        ))
        objects.append({"image": f"images/{name}", "category_id": category, **geometry})
    return entries, objects


def generate_synthetic(config: SyntheticConfig, out_dir: str | Path) -> DatasetManifest:
    """Write the synthetic dataset and return the train manifest.

    A held-out split is written to test.csv when `config.num_test > 0`.
    Byte-identical output for a fixed seed.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"Output directory not writable: {out_dir} ({e})",
                           code="OUTPUT_UNWRITABLE") from e

    train_entries, train_objects = _render_split(config, out_dir, "train", config.num_images, 0)
    manifest = DatasetManifest(
        entries=train_entries, num_categories=config.num_categories,
        split_name="train", root=str(out_dir),
    )
    save_manifest(manifest, out_dir / "train.csv")

    test_objects: list[dict] = []
    if config.num_test:
        test_entries, test_objects = _render_split(config, out_dir, "test", config.num_test, 1)
        save_manifest(
            DatasetManifest(entries=test_entries, num_categories=config.num_categories,
                            split_name="test", root=str(out_dir)),
            out_dir / "test.csv",
        )

    info = {
        "synthetic": True,
        "num_categories": config.num_categories,
        "categories": CATEGORIES[: config.num_categories],
        "config": config.model_dump(mode="json"),
        "objects": train_objects + test_objects,
    }
    (out_dir / DATASET_INFO_FILE).write_text(json.dumps(info, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Synthetic dataset written to {out_dir}: {config.num_images} train / "
                f"{config.num_test} test, {config.num_categories} categories, seed {config.seed}")
    return manifest
