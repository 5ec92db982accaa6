"""Global Compensation Unit.

Tensors are channels-first ``(B, C, H, W)`` throughout, as in the backbone.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError

COSINE_EPS = 1e-8


class SEBlock(nn.Module):
    """Squeeze-and-excitation gate: GAP -> FC -> ReLU -> FC -> sigmoid, applied per channel."""

    def __init__(self, channels: int, reduction_ratio: int = 4):
        super().__init__()
        reduced = max(channels // reduction_ratio, 1)
        self.fc1 = nn.Linear(channels, reduced)
        self.fc2 = nn.Linear(reduced, channels)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        squeezed = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(squeezed))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)[:, :, None, None]


def re_upsample(s: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear (align-corners) upsampling of ``s`` to ``target_hw``."""
    h, w = s.shape[-2:]
    th, tw = target_hw
    if th < h or tw < w:
        raise ValidationError(f"re_upsample target {target_hw} is smaller than source {(h, w)}")
    if (th, tw) == (h, w):
        return s
    return F.interpolate(s, size=(th, tw), mode="bilinear", align_corners=True)


def pixelwise_cosine(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Cosine similarity of channel vectors at each pixel -> (B, 1, H, W).

    Pixels where either vector has norm below ``eps`` get 0.
    """
    if a.shape != b.shape:
        raise ValidationError(f"cosine operands differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a, dim=1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=1, keepdim=True)
    dot = (a * b).sum(dim=1, keepdim=True)
    valid = (na >= eps) & (nb >= eps)
    denom = torch.where(valid, na * nb, torch.ones_like(na))
    return torch.where(valid, dot / denom, torch.zeros_like(dot))


def propagate_residual(r: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """``R * X + X`` with the single-channel residual broadcast over channels."""
    if r.shape[-2:] != x.shape[-2:] or r.shape[1] != 1:
        raise ValidationError(f"residual {tuple(r.shape)} does not match feature map {tuple(x.shape)}")
    return r * x + x


class GCU(nn.Module):
    """Skip-feature compensation for one row of the nested grid.

    ``forward(f, s, u)`` returns ``(residual, updated_skip)``.  ``s`` may carry a
    different channel count than ``f``; ``s_proj`` (1x1 conv) maps it onto ``f``'s
    channels before re-upsampling.  With equal channel counts and ``project_s=False``
    the projection is skipped.
    """

    def __init__(self, channels: int, s_channels: int | None = None, reduction_ratio: int = 4):
        super().__init__()
        s_channels = channels if s_channels is None else s_channels
        self.se_f = SEBlock(channels, reduction_ratio)
        self.se_u = SEBlock(channels, reduction_ratio)
        self.s_proj = nn.Conv2d(s_channels, channels, 1) if s_channels != channels else None

    def forward(self, f: torch.Tensor, s: torch.Tensor, u: torch.Tensor):
        return gcu_forward(f, s, u, self.se_f, self.se_u, self.s_proj)


def gcu_forward(f, s, u, se_f: SEBlock, se_u: SEBlock, s_proj: nn.Module | None = None):
    if f.shape != u.shape:
        raise ValidationError(f"U {tuple(u.shape)} must match F {tuple(f.shape)}")
    if s.dim() != 4 or s.shape[0] != f.shape[0]:
        raise ValidationError(f"S {tuple(s.shape)} is not a batch of feature maps matching F")
    if s_proj is not None:
        s = s_proj(s)
    if s.shape[1] != f.shape[1]:
        raise ValidationError(f"S has {s.shape[1]} channels, F has {f.shape[1]}")
    ru = re_upsample(s, f.shape[-2:])
    residual = pixelwise_cosine(ru * se_u(u), se_f(f))
    return residual, propagate_residual(residual, f)
