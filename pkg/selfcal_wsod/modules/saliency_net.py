"""
SELFCAL-WSOD — Module 4: Saliency network
Stage-2 encoder–decoder. The encoder yields F3, F4, F5; the decoder fuses them
bottom-up:

    Fi' = ReLU(conv3×3(ReLU(conv3×3(Fi))))                 mid_channels each
    P   = Up(σ(conv3×3(cat(F3', Up(F4'), Up(F5')))))      Up = bilinear

σ is applied at F3 resolution, then P is upsampled to the input size. Inference
is end-to-end, with no CRF and no refinement.
"""

import logging
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from selfcal_wsod.core.config import settings
from selfcal_wsod.core.errors import ConfigError, SaliencyNetError
from selfcal_wsod.modules.backbones import build_backbone
from selfcal_wsod.modules.datasets import load_image, save_map
from selfcal_wsod.schemas.models import (
    CheckpointMeta, DatasetManifest, DecoderConfig, ManifestEntry, ModelRole, validate_input_size,
)
from selfcal_wsod.services.checkpoint_service import load_checkpoint
from selfcal_wsod.utils.tensor_ops import as_batch, image_to_tensor, resize_bilinear, tensor_to_map

logger = logging.getLogger(__name__)


def _reduce(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class Decoder(nn.Module):
    def __init__(self, in_channels: tuple[int, int, int], cfg: DecoderConfig):
        super().__init__()
        if cfg.mid_channels < 1:
            raise SaliencyNetError("mid_channels must be >= 1", code="INVALID_DECODER")
        self.cfg = cfg
        self.reduce = nn.ModuleList(_reduce(c, cfg.mid_channels) for c in in_channels)
        self.fuse = nn.Conv2d(3 * cfg.mid_channels, 1, 3, padding=1)
        # near-zero logits at init keep the first predictions around 0.5
        nn.init.normal_(self.fuse.weight, std=1e-3)
        nn.init.zeros_(self.fuse.bias)

    def forward(self, f3: torch.Tensor, f4: torch.Tensor, f5: torch.Tensor,
                output_size: tuple[int, int]) -> torch.Tensor:
        return decode(f3, f4, f5, self, output_size)


def _power_of_two_ratio(big: int, small: int) -> bool:
    if small <= 0 or big % small:
        return False
    ratio = big // small
    return ratio & (ratio - 1) == 0


def decode(f3: torch.Tensor, f4: torch.Tensor, f5: torch.Tensor, decoder: Decoder,
           output_size: tuple[int, int]) -> torch.Tensor:
    """Fuse three feature levels into a B×1×H×W saliency map in (0,1)."""
    sizes = [tuple(f.shape[-2:]) for f in (f3, f4, f5)]
    for (h_big, w_big), (h_small, w_small) in zip(sizes, sizes[1:]):
        if not (_power_of_two_ratio(h_big, h_small) and _power_of_two_ratio(w_big, w_small)):
            raise SaliencyNetError(f"Incompatible feature sizes {sizes}: each level must be "
                                   f"a power-of-two multiple of the next", code="INCOMPATIBLE_SIZES")
    target = sizes[0]
    reduced = [
        resize_bilinear(block(f), target)
        for block, f in zip(decoder.reduce, (f3, f4, f5))
    ]
    prob = torch.sigmoid(decoder.fuse(torch.cat(reduced, dim=1)))
    return resize_bilinear(prob, tuple(output_size))


class SaliencyNet(nn.Module):
    def __init__(self, backbone: nn.Module, cfg: DecoderConfig):
        super().__init__()
        self.encoder = backbone
        self.decoder = Decoder(backbone.out_channels, cfg)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        f3, f4, f5 = self.encoder(images)
        return self.decoder(f3, f4, f5, tuple(images.shape[-2:]))

    def init_encoder_from(self, classifier_ckpt: str | Path) -> bool:
        """Copy the stage-1 backbone weights when every tensor shape matches."""
        payload, meta = load_checkpoint(classifier_ckpt)
        prefix = "backbone."
        source = {k[len(prefix):]: v for k, v in payload["state_dict"].items() if k.startswith(prefix)}
        target = self.encoder.state_dict()
        compatible = source.keys() == target.keys() and all(
            source[k].shape == target[k].shape for k in target
        )
        if not compatible:
            logger.warning(f"Classifier backbone ({meta.backbone.value}) does not match the "
                           f"saliency encoder; training the encoder from scratch")
            return False
        self.encoder.load_state_dict(source)
        logger.info(f"Saliency encoder initialized from {classifier_ckpt}")
        return True


def build_saliency_net(backbone: str, decoder_cfg: DecoderConfig, pretrained: bool = False) -> SaliencyNet:
    return SaliencyNet(build_backbone(backbone, pretrained=pretrained), decoder_cfg)


def load_saliency(path: str | Path) -> tuple[SaliencyNet, CheckpointMeta]:
    payload, meta = load_checkpoint(path)
    if meta.role != ModelRole.SALIENCY or meta.mid_channels is None:
        raise SaliencyNetError(f"{path} is not a saliency checkpoint", code="WRONG_CHECKPOINT_ROLE")
    model = build_saliency_net(meta.backbone, DecoderConfig(mid_channels=meta.mid_channels))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, meta


@torch.no_grad()
def predict(image: torch.Tensor, model: SaliencyNet) -> torch.Tensor:
    """End-to-end prediction in eval mode; output has the input's spatial size."""
    if not isinstance(model, SaliencyNet):
        raise SaliencyNetError("Saliency model not initialized", code="MODEL_NOT_INITIALIZED")
    model.eval()
    return model(as_batch(image, 3))


# ─────────────────────────────────────────────────────────────
# DATASET INFERENCE
# ─────────────────────────────────────────────────────────────

def iter_predictions(manifest: DatasetManifest, model: SaliencyNet,
                     size: int) -> Iterator[tuple[ManifestEntry, np.ndarray, np.ndarray]]:
    """Yield (entry, original RGB image, prediction at the original resolution)."""
    device = torch.device(settings.device)
    model.to(device)
    entries = tqdm(manifest.entries, desc="infer", disable=not settings.progress, leave=False)
    for entry in entries:
        path = manifest.resolve(entry.image_path)
        original = load_image(path)
        net_input = image_to_tensor(load_image(path, size)).to(device)
        pred = predict(net_input, model)
        pred = resize_bilinear(pred, original.shape[:2])
        yield entry, original, tensor_to_map(pred.clamp(0.0, 1.0))


def inference_size(size: Optional[int], meta: CheckpointMeta) -> int:
    """Network input resolution for inference: `size`, or the training size."""
    size = size or meta.input_size
    try:
        return validate_input_size(size)
    except ValueError as e:
        raise ConfigError(f"Invalid inference size: {e}", code="INVALID_INPUT_SIZE") from e


def infer(manifest: DatasetManifest, checkpoint: str | Path, out_dir: str | Path,
          size: Optional[int] = None) -> list[Path]:
    """Write one 8-bit PNG per manifest image, at the image's own resolution.

    `size` is the network input resolution (defaults to the training size).
    """
    model, meta = load_saliency(checkpoint)
    size = inference_size(size, meta)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise SaliencyNetError(f"Cannot create output directory {out_dir}: {e}",
                               code="OUTPUT_UNWRITABLE") from e
    written = []
    for entry, _, saliency in iter_predictions(manifest, model, size):
        try:
            written.append(save_map(saliency, out_dir / f"{entry.stem}.png"))
        except OSError as e:
            raise SaliencyNetError(f"Cannot write prediction for {entry.image_path}: {e}",
                                   code="OUTPUT_UNWRITABLE") from e
    logger.info(f"Inference: {len(written)} maps at input size {size} -> {out_dir}")
    return written
