"""
SELFCAL-WSOD — Module 5: Self-calibration
The λ schedule, the label blend, the blended BCE loss and the stage-2 loop.

Per batch (epoch n of N):
    P  = model(images)
    P' = binarize(minmax(pamr_refine(P, images)), 0.4)     binarize(Y1) while P is still flat
    λ  = lambda_at(n, N)
    L  = −mean[(1−λ)(Y1·log P + (1−Y1)·log(1−P)) + λ(P'·log P + (1−P')·log(1−P))]
    current ← (1−λ)·Y1 + λ·P'

Supervision always re-blends from Y1 and the latest P'. `current` is kept for
inspection, export and resume; it is never fed back as a target.
"""

import csv
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from selfcal_wsod.core.config import settings
from selfcal_wsod.core.errors import CalibrationError
from selfcal_wsod.modules.datasets import ManifestImageDataset, load_mask
from selfcal_wsod.modules.label_store import PseudoLabelStore
from selfcal_wsod.modules.metrics import mae
from selfcal_wsod.modules.refinement import binarize, pamr_refine
from selfcal_wsod.modules.saliency_net import SaliencyNet, build_saliency_net, iter_predictions
from selfcal_wsod.schemas.models import (
    AffinityConfig, CheckpointMeta, DatasetManifest, DecoderConfig, LambdaMode, LambdaPolicy,
    ModelRole, TrainConfig,
)
from selfcal_wsod.services.checkpoint_service import load_checkpoint, save_checkpoint
from selfcal_wsod.utils.seeding import restore_rng_state, rng_state, seed_everything
from selfcal_wsod.utils.tensor_ops import minmax_normalize, tensor_to_map

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
LOG_COLUMNS = ["epoch", "batch", "lambda", "loss", "val_mae"]
_EPOCH_CKPT_RE = re.compile(r"^saliency_epoch(\d+)\.pt$")


# ─────────────────────────────────────────────────────────────
# λ AND THE BLEND
# ─────────────────────────────────────────────────────────────

def lambda_at(n: int, N: int, policy: LambdaPolicy) -> float:
    """Blend weight for epoch n (1-based) of N."""
    if N < 1 or not 1 <= n <= N:
        raise CalibrationError(f"Epoch {n} outside 1..{N}", code="EPOCH_OUT_OF_RANGE")
    if policy.mode == LambdaMode.FIXED:
        return float(policy.fixed_value)
    scheduled = (n / N) ** policy.exponent
    if policy.mode == LambdaMode.SCHEDULED_CAPPED:
        scheduled = min(scheduled, policy.cap)
    return float(min(max(scheduled, 0.0), 1.0))


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise CalibrationError(f"λ must be in [0,1], got {lam}", code="INVALID_LAMBDA")


def update_labels(y1, p_prime, lam: float):
    """(1−λ)·Y1 + λ·P', pixelwise. Accepts tensors or arrays."""
    _check_lambda(lam)
    if tuple(y1.shape) != tuple(p_prime.shape):
        raise CalibrationError(f"Label shapes differ: {tuple(y1.shape)} vs {tuple(p_prime.shape)}",
                               code="SHAPE_MISMATCH")
    return (1.0 - lam) * y1 + lam * p_prime


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise CalibrationError("Non-finite values in loss inputs", code="NON_FINITE_INPUT")


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return values.mean()
    if reduction == "sum":
        return values.sum()
    raise CalibrationError(f"Unknown reduction {reduction!r}", code="INVALID_REDUCTION")


def bce(p: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    if p.shape != target.shape:
        raise CalibrationError(f"Shapes differ: {tuple(p.shape)} vs {tuple(target.shape)}",
                               code="SHAPE_MISMATCH")
    _check_finite(p, target)
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return _reduce(-(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)), reduction)


def sc_loss(p: torch.Tensor, y1: torch.Tensor, p_prime: torch.Tensor, lam: float,
            reduction: str = "mean") -> torch.Tensor:
    """Blended BCE: (1−λ)·BCE(P, Y1) + λ·BCE(P, P'), term by term."""
    _check_lambda(lam)
    if y1.shape != p_prime.shape:
        raise CalibrationError(f"Label shapes differ: {tuple(y1.shape)} vs {tuple(p_prime.shape)}",
                               code="SHAPE_MISMATCH")
    return (1.0 - lam) * bce(p, y1, reduction) + lam * bce(p, p_prime, reduction)


def sc_loss_with_logits(logits: torch.Tensor, y1: torch.Tensor, p_prime: torch.Tensor,
                        lam: float, reduction: str = "mean") -> torch.Tensor:
    """Same loss on pre-sigmoid logits; d(sum loss)/d logit = σ(logit) − target."""
    _check_finite(logits)
    target = update_labels(y1, p_prime, lam)
    return F.binary_cross_entropy_with_logits(logits, target, reduction=reduction)


# ─────────────────────────────────────────────────────────────
# ONE CALIBRATION STEP
# ─────────────────────────────────────────────────────────────

@torch.no_grad()
def calibration_seeds(pred: torch.Tensor, images: torch.Tensor, y1: torch.Tensor,
                      cfg: TrainConfig, affinity: AffinityConfig) -> torch.Tensor:
    """Binary P' for a B×1×H×W batch of predictions.

    Each prediction is PAMR-refined, rescaled to [0,1] and thresholded. A refined
    prediction spanning less than `cfg.seed_min_range` holds no seed yet, and its
    P' is the binarized Y1 instead.
    """
    refined = pamr_refine(pred, images, affinity)
    flat = refined.flatten(1)
    spread = (flat.amax(dim=1) - flat.amin(dim=1)).view(-1, 1, 1, 1)
    seeds = binarize(minmax_normalize(refined), cfg.binarize_threshold)
    return torch.where(spread < cfg.seed_min_range, binarize(y1, cfg.binarize_threshold), seeds)


def calibration_step(images: torch.Tensor, stems: list[str], model: SaliencyNet,
                     optimizer: torch.optim.Optimizer, store: PseudoLabelStore,
                     n: int, cfg: TrainConfig, affinity: AffinityConfig) -> tuple[float, float]:
    """Forward, refine, blend, step; updates store.current for the batch. Returns (loss, λ)."""
    lam = lambda_at(n, cfg.max_epochs, cfg.lambda_policy)
    model.train()
    pred = model(images)
    y1 = store.original_batch(stems, images.shape[-1]).to(pred.device)

    with torch.no_grad():
        if lam > 0.0:
            p_prime = calibration_seeds(pred.detach(), images, y1, cfg, affinity)
        else:
            # P' carries no weight at λ = 0
            p_prime = torch.zeros_like(y1)

    loss = sc_loss(pred, y1, p_prime, lam)
    if not torch.isfinite(loss):
        raise CalibrationError(f"Non-finite loss at epoch {n} on images {stems}", code="NON_FINITE_LOSS")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()

    blended = update_labels(y1, p_prime, lam)
    for i, stem in enumerate(stems):
        store.set_current(stem, tensor_to_map(blended[i]))
    return float(loss.detach()), lam


# ─────────────────────────────────────────────────────────────
# TRAINING LOOP
# ─────────────────────────────────────────────────────────────

@dataclass
class SaliencyTrainResult:
    checkpoint: Path
    log_path: Path
    history: list[dict] = field(default_factory=list)
    resumed_from: Optional[int] = None


def _validation_mae(model: SaliencyNet, manifest: DatasetManifest, size: int) -> float:
    """Mean MAE against held-out masks. Reported only, never used for decisions."""
    scores = [
        mae(pred, (load_mask(manifest.resolve(entry.label_path)) >= 0.5).astype(np.float32))
        for entry, _, pred in iter_predictions(manifest, model, size)
    ]
    return float(np.mean(scores))


def _epoch_checkpoints(out_dir: Path) -> list[tuple[int, Path]]:
    found = []
    for path in out_dir.glob("saliency_epoch*.pt"):
        match = _EPOCH_CKPT_RE.match(path.name)
        if match:
            found.append((int(match.group(1)), path))
    return sorted(found)


def _run_fingerprint(cfg: TrainConfig, decoder_cfg: DecoderConfig, affinity: AffinityConfig,
                     store: PseudoLabelStore) -> str:
    """Identifies the settings a set of epoch checkpoints was trained under."""
    blob = json.dumps({
        "train": cfg.model_dump(mode="json"),
        "decoder": decoder_cfg.model_dump(mode="json"),
        "affinity": affinity.model_dump(mode="json"),
        "labels": store.original_hash(),
    }, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _read_log(path: Path, upto_epoch: int) -> list[list[str]]:
    if not path.is_file():
        return []
    with path.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return [row for row in rows[1:] if row and int(row[0]) <= upto_epoch]


def _training_subset(manifest: DatasetManifest, store: PseudoLabelStore) -> DatasetManifest:
    entries = [e for e in manifest.entries if e.stem in store]
    dropped = len(manifest.entries) - len(entries)
    if dropped:
        logger.warning(f"{dropped} manifest images have no pseudo label and are not trained on")
    if not entries:
        raise CalibrationError("Pseudo-label store has no entry for this manifest", code="EMPTY_STORE")
    return manifest.model_copy(update={"entries": entries})


def train_saliency(manifest: DatasetManifest, store: PseudoLabelStore, cfg: TrainConfig,
                   decoder_cfg: DecoderConfig, affinity: AffinityConfig, out_dir: str | Path,
                   init_from: Optional[str | Path] = None,
                   val_manifest: Optional[DatasetManifest] = None,
                   resume: bool = True) -> SaliencyTrainResult:
    """Run max_epochs of calibration steps; checkpoint and snapshot the store each epoch.

    Writes saliency_epoch<n>.pt per epoch, saliency.pt at the end and
    saliency_log.csv (epoch,batch,lambda,loss,val_mae). val_mae is filled on the
    last row of an epoch when `val_manifest` carries masks.

    With `resume`, training continues after the newest epoch checkpoint that was
    written under the same settings and labels; otherwise it starts over.
    """
    if len(store) == 0:
        raise CalibrationError("Pseudo-label store is empty", code="EMPTY_STORE")
    train_set = _training_subset(manifest, store)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)
    device = torch.device(settings.device)
    fingerprint = _run_fingerprint(cfg, decoder_cfg, affinity, store)

    model = build_saliency_net(cfg.backbone, decoder_cfg, cfg.pretrained)
    if init_from is not None and cfg.init_from_classifier:
        model.init_encoder_from(init_from)
    model.to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    log_path = out_dir / "saliency_log.csv"
    start_epoch, resumed_from, kept_rows = 1, None, []
    previous = _epoch_checkpoints(out_dir)
    payload = None
    if resume and previous and previous[-1][0] <= cfg.max_epochs:
        payload, _ = load_checkpoint(previous[-1][1])
        if payload.get("fingerprint") != fingerprint:
            logger.info("Existing epoch checkpoints were trained under other settings; starting over")
            payload = None
    if payload is not None:
        epoch = payload["epoch"]
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        restore_rng_state(payload["rng"])
        store.load_state()
        if store.epoch_tag != epoch:
            raise CalibrationError(f"Store state is at epoch {store.epoch_tag}, checkpoint at {epoch}",
                                   code="RESUME_MISMATCH")
        start_epoch, resumed_from = epoch + 1, epoch
        kept_rows = _read_log(log_path, epoch)
        logger.info(f"Resuming saliency training after epoch {epoch}")
    else:
        for _, stale in previous:
            stale.unlink()
            stale.with_suffix(".json").unlink(missing_ok=True)
        store.reset_state()

    validate = val_manifest is not None and val_manifest.has_labels
    history: list[dict] = []
    with log_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        writer.writerows(kept_rows)
        for n in range(start_epoch, cfg.max_epochs + 1):
            generator = torch.Generator().manual_seed(cfg.seed + n)
            loader = DataLoader(
                ManifestImageDataset(train_set, cfg.input_size),
                batch_size=cfg.batch_size, shuffle=True, generator=generator,
                num_workers=settings.num_workers,
            )
            rows, losses, lam = [], [], 0.0
            batches = tqdm(loader, desc=f"sal epoch {n}", disable=not settings.progress, leave=False)
            for b, (images, _, indices) in enumerate(batches):
                stems = [train_set.entries[i].stem for i in indices.tolist()]
                loss, lam = calibration_step(images.to(device), stems, model, optimizer,
                                             store, n, cfg, affinity)
                losses.append(loss)
                rows.append([n, b, f"{lam:.6f}", f"{loss:.6f}", ""])

            val_mae = _validation_mae(model, val_manifest, cfg.input_size) if validate else None
            if val_mae is not None:
                rows[-1][-1] = f"{val_mae:.6f}"
            writer.writerows(rows)
            fh.flush()

            store.epoch_tag = n
            store.snapshot(n)
            store.save_state()
            meta = CheckpointMeta(role=ModelRole.SALIENCY, backbone=cfg.backbone, epoch=n,
                                  seed=cfg.seed, input_size=cfg.input_size,
                                  mid_channels=decoder_cfg.mid_channels)
            save_checkpoint(model.state_dict(), meta, out_dir / f"saliency_epoch{n}.pt",
                            extra={"optimizer": optimizer.state_dict(), "rng": rng_state(),
                                   "epoch": n, "fingerprint": fingerprint})

            record = {"epoch": n, "lambda": lam, "loss": float(np.mean(losses)), "val_mae": val_mae}
            history.append(record)
            suffix = f" val_mae={val_mae:.4f}" if val_mae is not None else ""
            logger.info(f"Saliency epoch {n}/{cfg.max_epochs}: λ={lam:.3f} loss={record['loss']:.4f}{suffix}")

    meta = CheckpointMeta(role=ModelRole.SALIENCY, backbone=cfg.backbone, epoch=cfg.max_epochs,
                          seed=cfg.seed, input_size=cfg.input_size,
                          mid_channels=decoder_cfg.mid_channels)
    checkpoint = save_checkpoint(model.cpu().state_dict(), meta, out_dir / "saliency.pt")
    return SaliencyTrainResult(checkpoint=checkpoint, log_path=log_path,
                               history=history, resumed_from=resumed_from)
