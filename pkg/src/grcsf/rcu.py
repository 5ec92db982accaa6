"""Regional Compensation Unit: patch-local cross-attention against residual maps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError


@dataclass
class PatchGrid:
    """Non-overlapping ``P x P`` patches of a ``(B, C, H, W)`` map.

    ``patches`` has shape ``(B, N, P*P, C)`` with patches in row-major grid order
    and pixels row-major inside each patch.
    """

    patches: torch.Tensor
    patch_size: int
    grid_dims: tuple[int, int]
    source_shape: tuple[int, int, int]  # (C, H, W)

    @property
    def n(self) -> int:
        return self.grid_dims[0] * self.grid_dims[1]


def patchify(x: torch.Tensor, p: int) -> PatchGrid:
    b, c, h, w = x.shape
    if p <= 0 or h % p or w % p:
        raise ValidationError(f"feature map {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    patches = x.reshape(b, c, gh, p, gw, p).permute(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, p * p, c)
    return PatchGrid(patches, p, (gh, gw), (c, h, w))


def unpatchify(grid: PatchGrid) -> torch.Tensor:
    c, h, w = grid.source_shape
    p = grid.patch_size
    gh, gw = grid.grid_dims
    b, n, t, ch = grid.patches.shape
    if gh * p != h or gw * p != w or n != gh * gw or t != p * p or ch != c:
        raise ValidationError(
            f"patch grid metadata {grid.grid_dims}x{p} / {grid.source_shape} inconsistent with {tuple(grid.patches.shape)}"
        )
    return grid.patches.reshape(b, gh, gw, p, p, c).permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


def resize_rm_to_scale(rm: torch.Tensor, target_hw: tuple[int, int], p: int) -> PatchGrid:
    """Bilinear (align-corners) resize of a ``(B, 1, H, W)`` residual map, then patchify."""
    if rm.dim() == 3:
        rm = rm.unsqueeze(1)
    th, tw = target_hw
    if p <= 0 or th % p or tw % p:
        raise ValidationError(f"target {target_hw} is not divisible by patch size {p}")
    if tuple(rm.shape[-2:]) != (th, tw):
        rm = F.interpolate(rm, size=(th, tw), mode="bilinear", align_corners=True)
    return patchify(rm, p)


class CrossAttention(nn.Module):
    """Single-head attention: queries from feature tokens, keys/values from residual tokens."""

    def __init__(self, channels: int, rm_channels: int = 1, dim: int | None = None):
        super().__init__()
        dim = channels if dim is None else dim
        self.dim = dim
        self.q = nn.Linear(channels, dim)
        self.k = nn.Linear(rm_channels, dim)
        self.v = nn.Linear(rm_channels, dim)
        self.out = nn.Linear(dim, channels)

    def forward(self, u: PatchGrid, rm: PatchGrid) -> PatchGrid:
        return cross_attention(u, rm, self)


def cross_attention(u: PatchGrid, rm: PatchGrid, attn: CrossAttention) -> PatchGrid:
    if u.grid_dims != rm.grid_dims or u.patch_size != rm.patch_size or u.patches.shape[0] != rm.patches.shape[0]:
        raise ValidationError(
            f"cross-attention operands differ: grid {u.grid_dims}/{rm.grid_dims}, P {u.patch_size}/{rm.patch_size}"
        )
    q = attn.q(u.patches)
    k = attn.k(rm.patches)
    v = attn.v(rm.patches)
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(attn.dim), dim=-1)
    out = attn.out(weights @ v)
    return PatchGrid(out, u.patch_size, u.grid_dims, u.source_shape)


class ImportanceScorer(nn.Module):
    """Per-patch score in (0, 1): 1x1 conv, average over positions, FC-ReLU, FC-ReLU, FC, sigmoid."""

    def __init__(self, channels: int):
        super().__init__()
        h1 = max(channels // 2, 8)
        h2 = max(channels // 4, 8)
        self.conv = nn.Linear(channels, channels)  # a 1x1 conv acts per position
        self.fc1 = nn.Linear(channels, h1)
        self.fc2 = nn.Linear(h1, h2)
        self.fc3 = nn.Linear(h2, 1)

    def forward(self, u: PatchGrid) -> torch.Tensor:
        return importance_scores(u, self)


def importance_scores(u: PatchGrid, scorer: ImportanceScorer) -> torch.Tensor:
    """Scores of shape ``(B, N)``."""
    pooled = scorer.conv(u.patches).mean(dim=2)
    hidden = F.relu(scorer.fc2(F.relu(scorer.fc1(pooled))))
    return torch.sigmoid(scorer.fc3(hidden)).squeeze(-1)


class RCU(nn.Module):
    """Fuses two residual maps into decoder features; ``M = w1*A1 + w2*A2 + U``."""

    def __init__(self, channels: int, patch_size: int, use_importance: bool = True):
        super().__init__()
        self.patch_size = patch_size
        self.use_importance = use_importance
        self.attn1 = CrossAttention(channels)
        self.attn2 = CrossAttention(channels)
        self.scorer = ImportanceScorer(channels) if use_importance else None
        self.w1 = nn.Parameter(torch.zeros(()))
        self.w2 = nn.Parameter(torch.zeros(()))

    def forward(self, u: torch.Tensor, rm1: torch.Tensor, rm2: torch.Tensor) -> torch.Tensor:
        return rcu_forward(u, rm1, rm2, self)


def rcu_forward(u: torch.Tensor, rm1: torch.Tensor, rm2: torch.Tensor, rcu: RCU) -> torch.Tensor:
    p = rcu.patch_size
    grid_u = patchify(u, p)
    hw = tuple(u.shape[-2:])
    scores = importance_scores(grid_u, rcu.scorer) if rcu.scorer is not None else None

    def branch(rm, attn):
        fused = cross_attention(grid_u, resize_rm_to_scale(rm, hw, p), attn)
        if scores is not None:
            fused = PatchGrid(fused.patches * scores[:, :, None, None], p, fused.grid_dims, fused.source_shape)
        return unpatchify(fused)

    return branch(rm1, rcu.attn1) * rcu.w1 + branch(rm2, rcu.attn2) * rcu.w2 + u
