"""
Conversions between the on-disk/numpy image layout (H×W×C, [0,1]) and the
batched torch layout (B×C×H×W) used by the networks, plus bilinear resizing.
"""

import numpy as np
import torch
import torch.nn.functional as F


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H×W×3 float array → 1×3×H×W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)


def map_to_tensor(saliency: np.ndarray) -> torch.Tensor:
    """H×W float array → 1×1×H×W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(saliency, dtype=np.float32))[None, None]


def tensor_to_map(t: torch.Tensor) -> np.ndarray:
    """Any tensor holding a single H×W map (1×1×H×W, 1×H×W, H×W) → H×W float32 array."""
    return t.detach().cpu().reshape(t.shape[-2], t.shape[-1]).numpy().astype(np.float32)


def as_batch(x: torch.Tensor, channels: int) -> torch.Tensor:
    """Promote H×W / C×H×W tensors to B×C×H×W."""
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[None] if x.shape[0] == channels else x[:, None]
    return x


def resize_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a B×C×H×W tensor; no-op when the size already matches."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def minmax_normalize(x: torch.Tensor, tol: float = 1e-6) -> torch.Tensor:
    """Per-sample rescale to [0,1]; samples spanning no more than `tol` become all zeros."""
    shape = (-1,) + (1,) * (x.dim() - 1)
    shifted = x - x.flatten(1).min(dim=1).values.view(shape)
    hi = shifted.flatten(1).max(dim=1).values.view(shape)
    return torch.where(hi > tol, shifted / hi.clamp_min(tol), torch.zeros_like(x))
