"""
SELFCAL-WSOD — Module 2a: Backbones
Feature extractors returning the last three blocks (F3, F4, F5) at strides 8/16/32.

Presets:
  tiny         5 strided conv blocks with GroupNorm, ~130k parameters, for desk-scale runs
  densenet169  torchvision DenseNet-169 (ImageNet weights when pretrained=True)

Both normalise [0,1] RGB input with ImageNet statistics internally, so callers
always pass raw image tensors.
"""

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from selfcal_wsod.core.errors import ConfigError
from selfcal_wsod.schemas.models import BackboneName

logger = logging.getLogger(__name__)

_MEAN = (0.485, 0.456, 0.406)
_STD = (0.229, 0.224, 0.225)
GROUPS = 8


class _Normalize(nn.Module):
    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.tensor(_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_STD).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std


def _block(cin: int, cout: int) -> nn.Sequential:
    # per-sample statistics: a batch of one at a 1×1 F5 still trains
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
        nn.GroupNorm(GROUPS, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.GroupNorm(GROUPS, cout),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Five stride-2 blocks; F3/F4/F5 are the outputs of blocks 3/4/5."""

    widths = (16, 24, 32, 48, 64)

    def __init__(self):
        super().__init__()
        self.normalize = _Normalize()
        chans = (3,) + self.widths
        self.blocks = nn.ModuleList(_block(chans[i], chans[i + 1]) for i in range(5))

    @property
    def out_channels(self) -> tuple[int, int, int]:
        return self.widths[2], self.widths[3], self.widths[4]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x = self.normalize(x)
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats[2], feats[3], feats[4]


class DenseNetBackbone(nn.Module):
    """DenseNet-169 split after dense blocks 2, 3 and the final norm."""

    def __init__(self, pretrained: bool = False):
        super().__init__()
        from torchvision.models import DenseNet169_Weights, densenet169

        weights = DenseNet169_Weights.IMAGENET1K_V1 if pretrained else None
        features = densenet169(weights=weights).features
        self.normalize = _Normalize()
        self.stem = nn.Sequential(
            features.conv0, features.norm0, features.relu0, features.pool0,
            features.denseblock1, features.transition1,
        )
        self.block3 = features.denseblock2
        self.block4 = nn.Sequential(features.transition2, features.denseblock3)
        self.block5 = nn.Sequential(features.transition3, features.denseblock4, features.norm5)

    @property
    def out_channels(self) -> tuple[int, int, int]:
        return 512, 1280, 1664

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x = self.normalize(x)
        f3 = self.block3(self.stem(x))
        f4 = self.block4(f3)
        f5 = F.relu(self.block5(f4))
        return f3, f4, f5


def build_backbone(name: BackboneName | str, pretrained: bool = False) -> nn.Module:
    try:
        name = BackboneName(name)
    except ValueError:
        raise ConfigError(f"Unknown backbone: {name}", code="UNKNOWN_BACKBONE")
    if name == BackboneName.TINY:
        if pretrained:
            logger.warning("tiny backbone has no pretrained weights; starting from scratch")
        return TinyBackbone()
    return DenseNetBackbone(pretrained=pretrained)
