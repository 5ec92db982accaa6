"""Segmentation objectives on probability maps."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ValidationError

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    kind: str = "mixed"
    alpha: float = 0.25
    gamma: float = 2.0
    smooth: float = 1e-6

    def validate(self) -> None:
        if self.kind not in ("mixed", "focal"):
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in (0, 1]")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be non-negative")
        if self.smooth <= 0:
            raise ConfigurationError("smooth must be positive")


def _check(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, smooth: float = 1e-6) -> torch.Tensor:
    """Soft dice over the whole batch: ``1 - (2 sum(p*g) + s) / (sum p + sum g + s)``."""
    _check(pred, gt)
    inter = (pred * gt).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + gt.sum() + smooth)


def focal_loss(pred: torch.Tensor, gt: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Pixel mean of ``-alpha (1 - p_t)^gamma log p_t``, predictions clamped to [1e-7, 1 - 1e-7]."""
    _check(pred, gt)
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_t = torch.where(gt > 0.5, p, 1.0 - p)
    return (-alpha * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def mixed_loss(pred: torch.Tensor, gt: torch.Tensor, config: LossConfig | None = None) -> torch.Tensor:
    config = config or LossConfig()
    return dice_loss(pred, gt, config.smooth) + focal_loss(pred, gt, config.alpha, config.gamma)


def segmentation_loss(pred: torch.Tensor, gt: torch.Tensor, config: LossConfig) -> torch.Tensor:
    if config.kind == "focal":
        return focal_loss(pred, gt, config.alpha, config.gamma)
    return mixed_loss(pred, gt, config)
