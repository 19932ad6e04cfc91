"""
SELFCAL-WSOD — Module 3: Refinement
Training-free refinement of coarse maps and stage-1 pseudo-label generation.

Pipeline per image (recorded in store.json):
    multiscale_cam → pamr_refine → min-max rescale → binarize(0.4) → crf_refine (optional plugin) → Y1 PNG

Each refined map is rescaled to [0,1] before the threshold. Stage 2 rescales its P′
seeds the same way.

pamr_refine:
    For every pixel i and each neighbour j in a dilated 3×3 window (8 neighbours per
    dilation, replicate padding):
        d_ij = ‖I_i − I_j‖₁        σ_i = std_j(d_ij), floored
        a_ij = softmax_j(−d_ij / σ_i)
    m ← Σ_j a_ij m_j, repeated `iterations` times. The affinities depend on the image
    only, so the operator is linear, row-stochastic and range-preserving in m.
"""

import logging
import shutil
import warnings
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from selfcal_wsod.core.config import settings
from selfcal_wsod.core.errors import RefinementError, WsodError
from selfcal_wsod.modules.classifier_cam import load_classifier, multiscale_cam
from selfcal_wsod.modules.datasets import load_image, save_map
from selfcal_wsod.modules.label_store import PseudoLabelStore
from selfcal_wsod.schemas.models import (
    AffinityConfig, CrfParams, DatasetManifest, PseudoLabelConfig, StoreMeta,
)
from selfcal_wsod.services.cache_service import cache_get_array, cache_set_array, cam_cache_key
from selfcal_wsod.services.checkpoint_service import file_hash
from selfcal_wsod.utils.tensor_ops import (
    as_batch, image_to_tensor, map_to_tensor, minmax_normalize, resize_bilinear, tensor_to_map,
)

logger = logging.getLogger(__name__)

# Optional dense-CRF plugin (pydensecrf)
try:
    import pydensecrf.densecrf as dcrf
    from pydensecrf.utils import unary_from_softmax
    CRF_OK = True
except ImportError:
    CRF_OK = False
    logger.warning("pydensecrf not installed. CRF refinement is a pass-through.")


# ─────────────────────────────────────────────────────────────
# AFFINITY PROPAGATION
# ─────────────────────────────────────────────────────────────

def _dilated_neighbors(x: torch.Tensor, dilations: list[int]) -> torch.Tensor:
    """B×C×H×W → B×C×N×H×W, N = 8·len(dilations)."""
    height, width = x.shape[-2:]
    shifted = []
    for d in dilations:
        padded = F.pad(x, [d, d, d, d], mode="replicate")
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                top, left = d + dy * d, d + dx * d
                shifted.append(padded[:, :, top:top + height, left:left + width])
    return torch.stack(shifted, dim=2)


def compute_affinity(image: torch.Tensor, cfg: AffinityConfig) -> torch.Tensor:
    """Row-stochastic colour affinities, B×N×H×W (sums to 1 over N)."""
    image = as_batch(image, 3)
    neighbors = _dilated_neighbors(image, cfg.dilations)
    dist = (neighbors - image.unsqueeze(2)).abs().sum(dim=1)
    sigma = dist.std(dim=1, keepdim=True).clamp_min(cfg.sigma_floor)
    return torch.softmax(-dist / sigma, dim=1)


@torch.no_grad()
def pamr_refine(mask: torch.Tensor, image: torch.Tensor, cfg: AffinityConfig) -> torch.Tensor:
    """Refine B×1×H×W (or H×W) maps with the colour affinities of B×3×H×W images."""
    if cfg.iterations < 1:
        raise RefinementError("iterations must be >= 1", code="INVALID_ITERATIONS")
    shape = mask.shape
    mask = as_batch(mask, 1)
    image = as_batch(image, 3)
    if mask.shape[-2:] != image.shape[-2:] or mask.shape[0] != image.shape[0]:
        raise RefinementError(
            f"Mask {tuple(mask.shape)} and image {tuple(image.shape)} differ in size",
            code="SIZE_MISMATCH",
        )
    affinity = compute_affinity(image.to(mask.dtype), cfg).unsqueeze(1)
    refined = mask
    for _ in range(cfg.iterations):
        refined = (_dilated_neighbors(refined, cfg.dilations) * affinity).sum(dim=2)
    return refined.reshape(shape)


def binarize(mask, threshold: float = 0.4):
    """1 where value > threshold (strict), else 0. Works on tensors and arrays."""
    if not 0.0 < threshold < 1.0:
        raise RefinementError(f"threshold must be in (0,1), got {threshold}", code="INVALID_THRESHOLD")
    if isinstance(mask, np.ndarray):
        return (mask > threshold).astype(np.float32)
    return (mask > threshold).to(mask.dtype if mask.is_floating_point() else torch.float32)


def seed_mask(mask: torch.Tensor, image: torch.Tensor, cfg: AffinityConfig,
              threshold: float = 0.4) -> torch.Tensor:
    """PAMR-refine B×1×H×W maps, rescale each to [0,1], binarize. A constant map gives zeros."""
    refined = as_batch(pamr_refine(mask, image, cfg), 1)
    return binarize(minmax_normalize(refined), threshold).reshape(mask.shape)


# ─────────────────────────────────────────────────────────────
# DENSE CRF (optional)
# ─────────────────────────────────────────────────────────────

def crf_refine(mask: np.ndarray, image: np.ndarray, params: CrfParams) -> tuple[np.ndarray, bool]:
    """Foreground marginal of a 2-label dense CRF.

    Returns (map, refined). Without the plugin (or when disabled) the input is
    returned unchanged with refined=False; plugin failures only warn.
    """
    if not params.enabled or not CRF_OK:
        return mask, False
    try:
        height, width = mask.shape
        prob = np.clip(mask.astype(np.float32), 1e-5, 1.0 - 1e-5)
        crf = dcrf.DenseCRF2D(width, height, 2)
        crf.setUnaryEnergy(np.ascontiguousarray(unary_from_softmax(np.stack([1.0 - prob, prob]))))
        crf.addPairwiseGaussian(sxy=params.gaussian_sxy, compat=params.gaussian_compat)
        rgb = np.ascontiguousarray(np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8))
        crf.addPairwiseBilateral(sxy=params.bilateral_sxy, srgb=params.bilateral_srgb,
                                 rgbim=rgb, compat=params.bilateral_compat)
        q = np.array(crf.inference(params.iterations)).reshape(2, height, width)
        return np.clip(q[1], 0.0, 1.0).astype(np.float32), True
    except Exception as e:
        message = f"CRF refinement failed, keeping unrefined map: {e}"
        logger.warning(message)
        warnings.warn(message, RuntimeWarning)
        return mask, False


# ─────────────────────────────────────────────────────────────
# STAGE-1 PSEUDO LABELS
# ─────────────────────────────────────────────────────────────

def generate_pseudo_labels(manifest: DatasetManifest, classifier_ckpt: str | Path,
                           cfg: PseudoLabelConfig, store_dir: str | Path,
                           use_crf: bool = True) -> PseudoLabelStore:
    """Write Y1 for every manifest image; per-image failures are logged and skipped."""
    store_dir = Path(store_dir)
    model, meta = load_classifier(classifier_ckpt)
    device = torch.device(settings.device)
    model.to(device)
    ckpt_hash = file_hash(classifier_ckpt)

    stems = [e.stem for e in manifest.entries]
    if len(set(stems)) != len(stems):
        raise RefinementError("Image stems must be unique within a manifest", code="DUPLICATE_STEMS")

    y1_dir = store_dir / PseudoLabelStore.Y1_DIR
    if store_dir.exists():
        for stale in [y1_dir, *store_dir.glob("Y_epoch*")]:
            shutil.rmtree(stale, ignore_errors=True)
        for name in (PseudoLabelStore.META_FILE, PseudoLabelStore.STATE_FILE):
            (store_dir / name).unlink(missing_ok=True)
    y1_dir.mkdir(parents=True, exist_ok=True)

    crf_cfg = cfg.crf.model_copy(update={"enabled": cfg.crf.enabled and use_crf})
    written: list[str] = []
    skipped: list[str] = []
    crf_applied = 0
    entries = tqdm(manifest.entries, desc="pseudo labels", disable=not settings.progress, leave=False)
    for entry in entries:
        try:
            path = manifest.resolve(entry.image_path)
            original = load_image(path)
            height, width = original.shape[:2]

            key = cam_cache_key(ckpt_hash, path.resolve(), cfg.scales, meta.input_size)
            cam = cache_get_array(key)
            if cam is None:
                net_input = image_to_tensor(load_image(path, meta.input_size)).to(device)
                cam = tensor_to_map(multiscale_cam(net_input, model, cfg.scales))
                cache_set_array(key, cam)
            cam = resize_bilinear(map_to_tensor(cam), (height, width))

            label = tensor_to_map(seed_mask(cam, image_to_tensor(original), cfg.affinity, cfg.threshold))
            label, applied = crf_refine(label, original, crf_cfg)
            crf_applied += int(applied)
            save_map(label, y1_dir / f"{entry.stem}.png")
            written.append(entry.stem)
        except (WsodError, OSError, RuntimeError, ValueError) as e:
            logger.warning(f"Pseudo label skipped for {entry.image_path}: {e}")
            skipped.append(entry.stem)

    if not written:
        raise RefinementError("No pseudo label could be generated", code="NO_LABELS")

    # a missing plugin and --no-crf describe the same store
    crf_enabled = crf_cfg.enabled and CRF_OK
    pipeline = ["multiscale_cam", "pamr_refine", "minmax", f"binarize(>{cfg.threshold:g})"]
    if crf_enabled:
        pipeline.append("crf_refine")
    store_meta = StoreMeta(
        threshold=cfg.threshold, scales=cfg.scales, affinity=cfg.affinity,
        crf_enabled=crf_enabled, crf_applied=crf_applied, pipeline=pipeline,
        checkpoint_hash=ckpt_hash, entries=written, skipped=skipped,
    )
    store = PseudoLabelStore.create(store_dir, store_meta)
    logger.info(f"Pseudo labels: {len(written)} written, {len(skipped)} skipped, "
                f"CRF applied to {crf_applied} -> {store_dir}")
    return store
