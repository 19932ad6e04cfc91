"""
SELFCAL-WSOD — Module 2: Classifier & CAM
Stage-1 classification network, class activation maps and classifier training.

Scores (GAP head):
    Cls_k = Σ_c w[k,c] · GAP(F5)[c] + b[k]
CAM:
    map_k = Norm(ReLU(Σ_c w[k,c] · F5[c] + b[k]))      Norm = divide by max, zeros stay zero
    C_AM  = Σ_k max(Cls_k, 0) · map_k

Multi-scale inference averages C_AM over rescaled copies of the image at the
original resolution, then min-max rescales to [0,1].
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from selfcal_wsod.core.config import settings
from selfcal_wsod.core.errors import CamError
from selfcal_wsod.modules.backbones import build_backbone
from selfcal_wsod.modules.datasets import ManifestImageDataset
from selfcal_wsod.schemas.models import (
    CheckpointMeta, ClassifierConfig, DatasetManifest, ModelRole,
)
from selfcal_wsod.services.checkpoint_service import load_checkpoint, save_checkpoint
from selfcal_wsod.utils.seeding import seed_everything
from selfcal_wsod.utils.tensor_ops import as_batch, minmax_normalize, resize_bilinear

logger = logging.getLogger(__name__)


@dataclass
class CamStack:
    maps: torch.Tensor   # B×K×h×w, each map in [0,1]
    fused: torch.Tensor  # B×h×w, ≥ 0


class ClassifierHead(nn.Module):
    """1×1 convolution shared by the GAP scores and the CAMs (w_s, b_s)."""

    def __init__(self, in_channels: int, num_categories: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, num_categories, kernel_size=1)

    @property
    def weight(self) -> torch.Tensor:
        return self.conv.weight.flatten(1)  # K×C

    @property
    def bias(self) -> torch.Tensor:
        return self.conv.bias

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def num_categories(self) -> int:
        return self.conv.out_channels


class CamNet(nn.Module):
    def __init__(self, backbone: nn.Module, num_categories: int):
        super().__init__()
        self.backbone = backbone
        self.head = ClassifierHead(backbone.out_channels[-1], num_categories)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f5 = self.backbone(images)[-1]
        return classification_scores(f5, self.head), f5


def _check_channels(f5: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    f5 = as_batch(f5, head.in_channels) if f5.dim() < 4 else f5
    if f5.shape[1] != head.in_channels:
        raise CamError(f"Feature channels {f5.shape[1]} != head input channels {head.in_channels}",
                       code="CHANNEL_MISMATCH")
    return f5


def classification_scores(f5: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    """B×K scores from B×C×h×w features (C×h×w accepted)."""
    f5 = _check_channels(f5, head)
    return F.linear(f5.mean(dim=(2, 3)), head.weight, head.bias)


def class_activation_map(f5: torch.Tensor, head: ClassifierHead, scores: torch.Tensor) -> CamStack:
    f5 = _check_channels(f5, head)
    raw = F.relu(head.conv(f5))
    peak = raw.amax(dim=(2, 3), keepdim=True)
    maps = torch.where(peak > 0, raw / peak.clamp_min(torch.finfo(raw.dtype).tiny), torch.zeros_like(raw))
    scores = scores.reshape(f5.shape[0], -1).clamp_min(0)
    fused = (maps * scores[:, :, None, None]).sum(dim=1)
    return CamStack(maps=maps, fused=fused)


@torch.no_grad()
def multiscale_cam(image: torch.Tensor, model: CamNet, scales: Sequence[float]) -> torch.Tensor:
    """Averaged fused CAM at the input resolution, B×1×H×W in [0,1]."""
    if not isinstance(model, CamNet):
        raise CamError("Classifier model not initialized", code="MODEL_NOT_INITIALIZED")
    if not scales:
        raise CamError("At least one inference scale is required", code="NO_SCALES")
    model.eval()
    image = as_batch(image, 3)
    height, width = image.shape[-2:]
    total = torch.zeros(image.shape[0], 1, height, width, dtype=image.dtype, device=image.device)
    for scale in sorted(scales):
        size = (max(1, round(height * scale)), max(1, round(width * scale)))
        scaled = resize_bilinear(image, size)
        scores, f5 = model(scaled)
        cam = class_activation_map(f5, model.head, scores).fused[:, None]
        total += resize_bilinear(cam, (height, width))
    return minmax_normalize(total / len(scales))


# ─────────────────────────────────────────────────────────────
# TRAINING
# ─────────────────────────────────────────────────────────────

@dataclass
class ClassifierTrainResult:
    checkpoint: Path
    history: list[dict] = field(default_factory=list)


def build_classifier(backbone: str, num_categories: int, pretrained: bool = False) -> CamNet:
    return CamNet(build_backbone(backbone, pretrained=pretrained), num_categories)


def load_classifier(path: str | Path) -> tuple[CamNet, CheckpointMeta]:
    payload, meta = load_checkpoint(path)
    if meta.role != ModelRole.CLASSIFIER or meta.num_categories is None:
        raise CamError(f"{path} is not a classifier checkpoint", code="WRONG_CHECKPOINT_ROLE")
    model = build_classifier(meta.backbone, meta.num_categories)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, meta


def classifier_step(model: CamNet, optimizer: torch.optim.Optimizer,
                    images: torch.Tensor, labels: torch.Tensor) -> tuple[float, int]:
    """One optimisation step; returns (loss, number of correct predictions)."""
    scores, _ = model(images)
    loss = F.cross_entropy(scores, labels)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    correct = int((scores.detach().argmax(dim=1) == labels).sum())
    return float(loss.detach()), correct


def train_classifier(manifest: DatasetManifest, config: ClassifierConfig,
                     out_dir: str | Path) -> ClassifierTrainResult:
    """Single-label softmax cross-entropy training with Adam.

    Writes classifier.pt/.json and classifier_log.csv (epoch,loss,accuracy).
    """
    if not manifest.has_categories:
        raise CamError("Classifier training needs a category_id on every manifest entry",
                       code="MISSING_CATEGORIES")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    generator = seed_everything(config.seed)
    device = torch.device(settings.device)

    model = build_classifier(config.backbone, manifest.num_categories, config.pretrained).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    loader = DataLoader(
        ManifestImageDataset(manifest, config.input_size),
        batch_size=config.batch_size, shuffle=True, generator=generator,
        num_workers=settings.num_workers,
    )

    history: list[dict] = []
    log_path = out_dir / "classifier_log.csv"
    with log_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "accuracy"])
        for epoch in range(config.max_epochs):
            model.train()
            loss_sum, correct, seen = 0.0, 0, 0
            batches = tqdm(loader, desc=f"cls epoch {epoch}", disable=not settings.progress, leave=False)
            for images, labels, indices in batches:
                images, labels = images.to(device), labels.to(device)
                loss, hits = classifier_step(model, optimizer, images, labels)
                if not math.isfinite(loss):
                    ids = [manifest.entries[i].image_path for i in indices.tolist()]
                    raise CamError(f"Non-finite classification loss at epoch {epoch} on {ids}",
                                   code="NON_FINITE_LOSS")
                loss_sum += loss * len(labels)
                correct += hits
                seen += len(labels)
            record = {"epoch": epoch, "loss": loss_sum / seen, "accuracy": correct / seen}
            history.append(record)
            writer.writerow([epoch, f"{record['loss']:.6f}", f"{record['accuracy']:.4f}"])
            fh.flush()
            logger.info(f"Classifier epoch {epoch}: loss={record['loss']:.4f} "
                        f"accuracy={record['accuracy']:.3f}")

    meta = CheckpointMeta(
        role=ModelRole.CLASSIFIER, backbone=config.backbone,
        num_categories=manifest.num_categories, epoch=config.max_epochs - 1,
        seed=config.seed, input_size=config.input_size,
    )
    checkpoint = save_checkpoint(model.cpu().state_dict(), meta, out_dir / "classifier.pt")
    return ClassifierTrainResult(checkpoint=checkpoint, history=history)
