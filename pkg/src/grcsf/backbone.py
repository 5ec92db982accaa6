"""Nested U-shaped segmentation network with optional GCU and RCU, and its trainer.

Grid notation: node ``X[i, j]`` lives at scale level ``i`` (resolution ``H / 2**i``)
and column ``j``.  Column 0 is the encoder; node ``X[i, j]`` for ``j >= 1`` convolves
the concatenation ``[X[i, 0], ..., X[i, j-1], up(X[i+1, j-1])]``.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io
from .errors import ConfigurationError, ValidationError
from .gcu import GCU, propagate_residual
from .losses import LossConfig, segmentation_loss
from .rcu import RCU
from .synthdata import ImageSlice

log = logging.getLogger(__name__)

# Last three decoder stages at 224 px use patches 8, 8, 16; scaled to 64 px.
DEFAULT_RCU_PATCH_SIZES = (4, 4, 8)


@dataclass
class ModelConfig:
    input_size: int = 64
    depth: int = 4
    base_channels: int = 8
    enable_gcu: bool = True
    enable_rcu: bool = True
    enable_importance: bool = True
    rcu_patch_sizes: tuple[int, ...] = DEFAULT_RCU_PATCH_SIZES
    se_reduction: int = 4
    loss: str = "mixed"
    alpha: float = 0.25
    gamma: float = 2.0
    smooth: float = 1e-6
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.rcu_patch_sizes = tuple(int(p) for p in self.rcu_patch_sizes)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def rcu_rows(self) -> list[int]:
        """Scale levels hosting an RCU, deepest first, aligned with ``rcu_patch_sizes``."""
        n = len(self.rcu_patch_sizes)
        return list(range(n - 1, -1, -1))

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.alpha, self.gamma, self.smooth)

    def validate(self) -> None:
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigurationError("depth and base_channels must be positive")
        if self.input_size <= 0 or self.input_size % 2**self.depth:
            raise ConfigurationError(f"input_size {self.input_size} is not divisible by 2**depth = {2**self.depth}")
        self.loss_config().validate()
        if self.enable_rcu:
            if not self.rcu_patch_sizes or len(self.rcu_patch_sizes) > self.depth:
                raise ConfigurationError(
                    f"need between 1 and depth={self.depth} RCU patch sizes, got {self.rcu_patch_sizes}"
                )
            bad = []
            for stage, (row, p) in enumerate(zip(self.rcu_rows(), self.rcu_patch_sizes)):
                side = self.input_size // 2**row
                if p <= 0 or side % p:
                    bad.append((stage, p))
            if bad:
                raise ConfigurationError(f"RCU patch sizes do not divide their stage resolution: (stage, patch) {bad}")


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=False),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=False),
        )


class Up(nn.Module):
    """Bilinear x2 (align-corners) followed by a 1x1 conv onto the target row's width."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.proj = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=True)
        return self.proj(x)


class GRCSFNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.depth
        ch = config.channels
        self.nodes = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        self.nodes["0_0"] = ConvBlock(1, ch(0))
        for i in range(1, d + 1):
            self.nodes[f"{i}_0"] = ConvBlock(ch(i - 1), ch(i))
        for j in range(1, d + 1):
            for i in range(0, d - j + 1):
                self.ups[f"{i}_{j}"] = Up(ch(i + 1), ch(i))
                self.nodes[f"{i}_{j}"] = ConvBlock((j + 1) * ch(i), ch(i))
        self.head = nn.Conv2d(ch(0), 1, 1)
        self.gcus = nn.ModuleDict()
        if config.enable_gcu:
            for i in range(d):
                self.gcus[str(i)] = GCU(ch(i), ch(i + 1), config.se_reduction)
        self.rcus = nn.ModuleDict()
        if config.enable_rcu:
            for row, p in zip(config.rcu_rows(), config.rcu_patch_sizes):
                self.rcus[str(row)] = RCU(ch(row), p, config.enable_importance)
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        """He-normal conv weights, zero biases; other layers keep their defaults under ``seed``."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("w1") or name.endswith("w2"):
                    p.zero_()
                elif p.dim() == 4:
                    fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                    p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                elif p.dim() == 2:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.copy_((torch.rand(p.shape, generator=gen) * 2 - 1) * bound)
                elif "bn" in name or self._is_bn_weight(name):
                    p.fill_(1.0)
                else:
                    p.zero_()

    def _is_bn_weight(self, name: str) -> bool:
        module = self.get_submodule(name.rsplit(".", 1)[0])
        return isinstance(module, nn.BatchNorm2d) and name.endswith("weight")

    def logits(self, x: torch.Tensor, rm1: torch.Tensor | None = None, rm2: torch.Tensor | None = None,
               trace: dict | None = None) -> torch.Tensor:
        cfg = self.config
        d = cfg.depth
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if self.rcus and (rm1 is None or rm2 is None):
            raise ValidationError("residual maps are required when the RCU is enabled")
        X: dict[tuple[int, int], torch.Tensor] = {}
        X[0, 0] = self.nodes["0_0"](x)
        for i in range(1, d + 1):
            X[i, 0] = self.nodes[f"{i}_0"](F.max_pool2d(X[i - 1, 0], 2))

        skip0: dict[int, torch.Tensor] = {}
        residual: dict[int, torch.Tensor] = {}
        for j in range(1, d + 1):
            for i in range(0, d - j + 1):
                u = self.ups[f"{i}_{j}"](X[i + 1, j - 1])
                if j == 1:
                    if str(i) in self.gcus:
                        residual[i], skip0[i] = self.gcus[str(i)](X[i, 0], X[i + 1, 0], u)
                    else:
                        skip0[i] = X[i, 0]
                if str(i) in self.rcus and j == d - i:
                    u = self.rcus[str(i)](u, rm1, rm2)
                row = [skip0[i]] + [X[i, k] for k in range(1, j)]
                out = self.nodes[f"{i}_{j}"](torch.cat(row + [u], dim=1))
                if i in residual:
                    out = propagate_residual(residual[i], out)
                X[i, j] = out
        if trace is not None:
            trace.update({"nodes": X, "residual": residual, "skip0": skip0})
        return self.head(X[0, d])

    def forward(self, x, rm1=None, rm2=None):
        return torch.sigmoid(self.logits(x, rm1, rm2))


def build_model(config: ModelConfig) -> GRCSFNet:
    torch.manual_seed(config.seed)
    return GRCSFNet(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -------------------------------------------------------------- checkpoints


def save_model(path, model: GRCSFNet, extra: dict | None = None) -> None:
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"kind": "grcsf", "config": asdict(model.config), **(extra or {})}
    io.save_checkpoint(path, state, meta)


def load_model(path) -> GRCSFNet:
    tensors, meta = io.load_checkpoint(path)
    if meta.get("kind") != "grcsf":
        raise ValidationError(f"{path}: not a segmentation checkpoint")
    model = GRCSFNet(ModelConfig(**meta["config"]))
    current = model.state_dict()
    state = {k: torch.from_numpy(v.copy()).to(current[k].dtype) for k, v in tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model


# ---------------------------------------------------------------- inference


def _batch(slices: Sequence[ImageSlice], mrm_store, need_mrm: bool):
    x = torch.tensor(np.stack([s.pixels for s in slices]), dtype=torch.float32).unsqueeze(1)
    y = torch.tensor(np.stack([s.mask for s in slices]), dtype=torch.float32).unsqueeze(1)
    if not need_mrm:
        return x, y, None, None
    if mrm_store is None:
        raise ValidationError("residual maps are required when the RCU is enabled")
    pairs = [mrm_store[s.key] for s in slices]
    rm1 = torch.tensor(np.stack([p.rm1 for p in pairs]), dtype=torch.float32).unsqueeze(1)
    rm2 = torch.tensor(np.stack([p.rm2 for p in pairs]), dtype=torch.float32).unsqueeze(1)
    return x, y, rm1, rm2


@torch.no_grad()
def predict_proba(model: GRCSFNet, slices: Sequence[ImageSlice], mrm_store=None, batch_size: int = 16) -> np.ndarray:
    model.eval()
    size = model.config.input_size
    for s in slices:
        if s.shape != (size, size):
            raise ValidationError(f"slice {s.key} is {s.shape}, model expects {size}x{size}")
    outs = []
    for start in range(0, len(slices), batch_size):
        x, _, rm1, rm2 = _batch(slices[start : start + batch_size], mrm_store, bool(model.rcus))
        outs.append(model(x, rm1, rm2)[:, 0].numpy())
    return np.concatenate(outs) if outs else np.zeros((0, size, size), dtype=np.float32)


def predict_mask(model: GRCSFNet, slices, mrm_store=None, threshold: float | None = None) -> np.ndarray:
    threshold = model.config.threshold if threshold is None else threshold
    return threshold_mask(predict_proba(model, slices, mrm_store), threshold)


def threshold_mask(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


# ----------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 30
    warmup_epochs: int = 5
    warmup_factor: float = 10.0
    patience: int = 10
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)


def warmup_lr(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Cosine ramp from ``lr / warmup_factor`` to ``lr`` over the warmup epochs, then constant."""
    total = cfg.warmup_epochs * steps_per_epoch
    if total <= 0 or step >= total:
        return cfg.lr
    start = cfg.lr / cfg.warmup_factor
    return start + (cfg.lr - start) * 0.5 * (1.0 - math.cos(math.pi * step / total))


class EarlyStopping:
    """Stop once the monitored loss has failed to improve for ``patience`` consecutive epochs."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, value: float, epoch: int) -> bool:
        """Record ``value``; return True when training should stop."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    model: GRCSFNet
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


@torch.no_grad()
def evaluate_loss(model: GRCSFNet, slices, mrm_store, batch_size: int = 16) -> float:
    model.eval()
    cfg = model.config.loss_config()
    total, count = 0.0, 0
    for start in range(0, len(slices), batch_size):
        chunk = slices[start : start + batch_size]
        x, y, rm1, rm2 = _batch(chunk, mrm_store, bool(model.rcus))
        total += float(segmentation_loss(model(x, rm1, rm2), y, cfg)) * len(chunk)
        count += len(chunk)
    return total / count


def train(model: GRCSFNet, train_slices: Sequence[ImageSlice], val_slices: Sequence[ImageSlice], mrm_store=None,
          config: TrainConfig | None = None, history_path=None, checkpoint_path=None) -> TrainResult:
    """Adam with cosine warmup and early stopping; returns the best-validation weights."""
    config = config or TrainConfig()
    if not train_slices:
        raise ConfigurationError("training set is empty")
    need_mrm = bool(model.rcus)
    if need_mrm:
        for s in list(train_slices) + list(val_slices):
            if mrm_store is None or s.key not in mrm_store:
                raise ValidationError(f"missing residual maps for slice {s.key}")
    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    loss_cfg = model.config.loss_config()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    steps_per_epoch = math.ceil(len(train_slices) / config.batch_size)
    stopper = EarlyStopping(config.patience)
    best_state = copy.deepcopy(model.state_dict())
    history = []
    step = 0
    stopped = False
    for epoch in range(config.max_epochs):
        model.train()
        order = torch.randperm(len(train_slices), generator=gen).tolist()
        running, seen = 0.0, 0
        for b in range(steps_per_epoch):
            chunk = [train_slices[k] for k in order[b * config.batch_size : (b + 1) * config.batch_size]]
            lr = warmup_lr(step, steps_per_epoch, config)
            for group in opt.param_groups:
                group["lr"] = lr
            x, y, rm1, rm2 = _batch(chunk, mrm_store, need_mrm)
            loss = segmentation_loss(model(x, rm1, rm2), y, loss_cfg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.detach()) * len(chunk)
            seen += len(chunk)
            step += 1
        val_loss = evaluate_loss(model, val_slices, mrm_store) if val_slices else running / seen
        record = {"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss, "lr": lr}
        history.append(record)
        log.info("epoch %d train %.4f val %.4f", epoch, record["train_loss"], val_loss)
        improved = val_loss < stopper.best
        if stopper.step(val_loss, epoch):
            stopped = True
        if improved:
            best_state = copy.deepcopy(model.state_dict())
            if checkpoint_path is not None:
                save_model(checkpoint_path, model, {"epoch": epoch, "val_loss": val_loss})
        if stopped:
            break
    model.load_state_dict(best_state)
    model.eval()
    if history_path is not None:
        io.write_text_atomic(history_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in history))
    return TrainResult(model, history, stopper.best_epoch, stopped)
