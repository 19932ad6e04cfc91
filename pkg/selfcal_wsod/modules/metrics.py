"""
SELFCAL-WSOD — Module 6: Metrics
MAE, F-measure, S-measure and E-measure, plus dataset-level evaluation.

Conventions:
  - g is binarized at 0.5; p is a real map in [0,1] of the same shape.
  - F-measure (β² = 0.3): a pixel is predicted foreground when p ≥ t.
      max_over_thresholds  max over t = k/255, k = 1..255, and the adaptive t
      adaptive             t = min(2·mean(p), 1); t = 0 means an empty prediction
    Precision with no predicted foreground is 0. All-background g gives 0 with a warning.
  - S-measure (α = 0.5): object-aware + 4-quadrant region similarity split at the
    g centroid. All-background g → 1 − mean(p); all-foreground g → mean(p).
  - E-measure: enhanced alignment of the adaptively binarized p against g,
    averaged over pixels.
"""

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from selfcal_wsod.core.config import settings
from selfcal_wsod.core.errors import MetricsError
from selfcal_wsod.modules.datasets import load_mask
from selfcal_wsod.schemas.models import DatasetManifest, FProtocol, MetricReport, MetricRow

logger = logging.getLogger(__name__)

EPS = np.spacing(1.0)
REPORT_COLUMNS = ["id", "s_measure", "e_measure", "f_measure", "mae"]


def _prepare(p, g) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise MetricsError(f"Prediction {p.shape} and ground truth {g.shape} differ in shape",
                           code="SHAPE_MISMATCH")
    if p.ndim != 2 or p.size == 0:
        raise MetricsError(f"Expected a non-empty H×W map, got {p.shape}", code="SHAPE_MISMATCH")
    return np.clip(p, 0.0, 1.0), g >= 0.5


def _adaptive_binary(p: np.ndarray) -> np.ndarray:
    threshold = min(2.0 * float(p.mean()), 1.0)
    if threshold <= 0.0:
        return np.zeros(p.shape, dtype=bool)
    return p >= threshold


# ─────────────────────────────────────────────────────────────
# MAE
# ─────────────────────────────────────────────────────────────

def mae(p, g) -> float:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise MetricsError(f"Prediction {p.shape} and ground truth {g.shape} differ in shape",
                           code="SHAPE_MISMATCH")
    return float(np.mean(np.abs(p - g)))


# ─────────────────────────────────────────────────────────────
# F-MEASURE
# ─────────────────────────────────────────────────────────────

def _f_from_counts(tp: np.ndarray, predicted: np.ndarray, positives: int, beta2: float) -> np.ndarray:
    tp = tp.astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = tp / positives
    denom = beta2 * precision + recall
    return np.divide((1 + beta2) * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def f_measure(p, g, beta2: float = 0.3,
              protocol: FProtocol | str = FProtocol.MAX_OVER_THRESHOLDS, warn: bool = True) -> float:
    p, gt = _prepare(p, g)
    protocol = FProtocol(protocol)
    positives = int(gt.sum())
    if positives == 0:
        if warn:
            warnings.warn("F-measure undefined for all-background ground truth; reporting 0",
                          RuntimeWarning, stacklevel=2)
        return 0.0

    adaptive = _adaptive_binary(p)
    adaptive_f = _f_from_counts(
        np.array([np.count_nonzero(adaptive & gt)]), np.array([np.count_nonzero(adaptive)]),
        positives, beta2,
    )[0]
    if protocol == FProtocol.ADAPTIVE:
        return float(adaptive_f)

    # counts of p ≥ t for all 255 thresholds via sorted values
    thresholds = np.arange(1, 256, dtype=np.float64) / 255.0
    all_sorted = np.sort(p, axis=None)
    fg_sorted = np.sort(p[gt])
    predicted = all_sorted.size - np.searchsorted(all_sorted, thresholds, side="left")
    tp = fg_sorted.size - np.searchsorted(fg_sorted, thresholds, side="left")
    scores = _f_from_counts(tp, predicted, positives, beta2)
    return float(max(scores.max(), adaptive_f))


# ─────────────────────────────────────────────────────────────
# S-MEASURE
# ─────────────────────────────────────────────────────────────

def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _s_object(p: np.ndarray, gt: np.ndarray) -> float:
    u = float(gt.mean())
    fg = _object_score(p[gt])
    bg = _object_score(1.0 - p[~gt])
    return u * fg + (1.0 - u) * bg


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    x, y = p.mean(), g.mean()
    denom = max(n - 1, 1)
    sigma_x = float(((p - x) ** 2).sum()) / denom
    sigma_y = float(((g - y) ** 2).sum()) / denom
    sigma_xy = float(((p - x) * (g - y)).sum()) / denom
    alpha = 4.0 * x * y * sigma_xy
    beta = (x * x + y * y) * (sigma_x + sigma_y)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _split_point(gt: np.ndarray) -> tuple[int, int]:
    """Quadrant boundary (column, row): the pixel edge nearest the g centroid."""
    rows, cols = np.nonzero(gt)
    cy, cx = rows.mean(), cols.mean()
    return int(np.round(cx + 0.5)), int(np.round(cy + 0.5))


def _s_region(p: np.ndarray, gt: np.ndarray) -> float:
    height, width = gt.shape
    x, y = _split_point(gt)
    g = gt.astype(np.float64)
    quadrants = [
        (slice(0, y), slice(0, x)), (slice(0, y), slice(x, width)),
        (slice(y, height), slice(0, x)), (slice(y, height), slice(x, width)),
    ]
    score = 0.0
    for rows, cols in quadrants:
        block = p[rows, cols]
        if block.size == 0:
            continue
        score += block.size / p.size * _ssim(block, g[rows, cols])
    return score


def s_measure(p, g, alpha: float = 0.5) -> float:
    p, gt = _prepare(p, g)
    fg_ratio = float(gt.mean())
    if fg_ratio == 0.0:
        score = 1.0 - float(p.mean())
    elif fg_ratio == 1.0:
        score = float(p.mean())
    else:
        score = alpha * _s_object(p, gt) + (1.0 - alpha) * _s_region(p, gt)
    return float(min(max(score, 0.0), 1.0))


# ─────────────────────────────────────────────────────────────
# E-MEASURE
# ─────────────────────────────────────────────────────────────

def e_measure(p, g) -> float:
    p, gt = _prepare(p, g)
    fm = _adaptive_binary(p).astype(np.float64)
    gtf = gt.astype(np.float64)
    fg_ratio = float(gtf.mean())
    if fg_ratio == 0.0:
        enhanced = 1.0 - fm
    elif fg_ratio == 1.0:
        enhanced = fm
    else:
        align_p = fm - fm.mean()
        align_g = gtf - fg_ratio
        align = 2.0 * align_g * align_p / (align_g ** 2 + align_p ** 2 + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(min(max(enhanced.mean(), 0.0), 1.0))


# ─────────────────────────────────────────────────────────────
# DATASET EVALUATION
# ─────────────────────────────────────────────────────────────

def _png_index(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise MetricsError(f"Directory not found: {directory}", code="DIRECTORY_NOT_FOUND")
    return {path.stem: path for path in directory.glob("*.png")}


def _gt_index(gt_source: str | Path | DatasetManifest) -> dict[str, Path]:
    if isinstance(gt_source, DatasetManifest):
        if not gt_source.has_labels:
            raise MetricsError("Manifest has no label_path column to evaluate against",
                               code="NO_GROUND_TRUTH")
        return {e.stem: gt_source.resolve(e.label_path) for e in gt_source.entries}
    return _png_index(Path(gt_source))


def _evaluate_pair(stem: str, pred_path: Path, gt_path: Path, protocol: FProtocol) -> MetricRow:
    gt = load_mask(gt_path)
    pred = load_mask(pred_path, size=gt.shape)
    # runs in worker threads, which must not touch the process-wide warning filters
    f = f_measure(pred, gt, protocol=protocol, warn=False)
    if not gt.any():
        logger.warning(f"{stem}: all-background ground truth, F-measure reported as 0")
    return MetricRow(
        id=stem, s_measure=s_measure(pred, gt), e_measure=e_measure(pred, gt),
        f_measure=f, mae=mae(pred, (gt >= 0.5).astype(np.float64)),
    )


def write_report_csv(report: MetricReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [row.model_dump() for row in report.per_image]
    rows.append(report.aggregate.model_dump())
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.4f", lineterminator="\n")
    return path


def evaluate_dataset(pred_dir: str | Path, gt_source: str | Path | DatasetManifest,
                     protocol: FProtocol | str = FProtocol.MAX_OVER_THRESHOLDS,
                     out_csv: Optional[str | Path] = None) -> MetricReport:
    """Score every prediction PNG against the ground truth with the same stem.

    `gt_source` is a directory of mask PNGs or a manifest with label paths.
    """
    protocol = FProtocol(protocol)
    preds = _png_index(Path(pred_dir))
    gts = _gt_index(gt_source)
    stems = sorted(preds.keys() & gts.keys())
    missing = sorted(preds.keys() ^ gts.keys())
    for stem in missing:
        side = "ground truth" if stem in preds else "prediction"
        logger.warning(f"Unpaired image {stem}: no {side}")
    if not stems:
        raise MetricsError(f"No prediction/ground-truth pairs between {pred_dir} and the ground truth",
                           code="NO_PAIRS")

    workers = settings.num_workers or min(8, os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(lambda s: _evaluate_pair(s, preds[s], gts[s], protocol), stems))

    frame = pd.DataFrame([r.model_dump() for r in rows], columns=REPORT_COLUMNS)
    means = frame[REPORT_COLUMNS[1:]].mean()
    aggregate = MetricRow(id="MEAN", **{k: float(v) for k, v in means.items()})
    report = MetricReport(per_image=rows, aggregate=aggregate, f_protocol=protocol, missing=missing)
    if out_csv is not None:
        write_report_csv(report, out_csv)
    logger.info(f"Evaluation: {report.summary()}")
    return report
