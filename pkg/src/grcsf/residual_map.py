"""Toy masked autoencoder and multi-ratio residual maps (MRM).

The MAE is only a reconstruction engine here: it is trained on lesion-free
slices, then applied repeatedly under random masking.  The residual between an
image and its averaged reconstruction is large where the image departs from
what the MAE learned to expect.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

from . import io
from .errors import ConfigurationError, ValidationError
from .synthdata import ImageSlice

log = logging.getLogger(__name__)

DIFF_METRICS = ("absdiff", "mse", "ssim")
DEFAULT_RATIOS = (0.50, 0.75)
DEFAULT_ITERATIONS = 5


@dataclass
class MaeConfig:
    input_size: int = 64
    token_patch_size: int = 8
    encoder_dim: int = 128
    encoder_depth: int = 4
    decoder_dim: int = 64
    decoder_depth: int = 2
    heads: int = 4
    mask_ratio: float = 0.75
    train_mask_ratios: tuple[float, ...] = DEFAULT_RATIOS
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.train_mask_ratios = tuple(float(r) for r in self.train_mask_ratios)

    def validate(self) -> None:
        if self.input_size <= 0 or self.token_patch_size <= 0 or self.input_size % self.token_patch_size:
            raise ConfigurationError(
                f"input_size {self.input_size} is not divisible by token_patch_size {self.token_patch_size}"
            )
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if not self.train_mask_ratios or not all(0.0 < r < 1.0 for r in self.train_mask_ratios):
            raise ConfigurationError(f"train_mask_ratios must be fractions in (0, 1), got {self.train_mask_ratios}")
        for name in ("encoder_dim", "encoder_depth", "decoder_dim", "decoder_depth", "heads", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.encoder_dim % self.heads or self.decoder_dim % self.heads:
            raise ConfigurationError("encoder_dim and decoder_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.input_size // self.token_patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2


def _sincos_2d(dim: int, grid: int) -> torch.Tensor:
    """Fixed 2D sine-cosine position table of shape (grid*grid, dim)."""
    if dim % 4:
        raise ConfigurationError(f"embedding dim {dim} must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    out_y = np.outer(ys.reshape(-1), omega)
    out_x = np.outer(xs.reshape(-1), omega)
    table = np.concatenate([np.sin(out_y), np.cos(out_y), np.sin(out_x), np.cos(out_x)], axis=1)
    return torch.tensor(table, dtype=torch.float32)


def _blocks(dim: int, depth: int, heads: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        dim, heads, dim_feedforward=4 * dim, dropout=0.0, activation="gelu", batch_first=True, norm_first=True
    )
    return nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)


class MaskedAutoencoder(nn.Module):
    """ViT encoder on visible tokens, light decoder over all token slots."""

    def __init__(self, config: MaeConfig):
        super().__init__()
        config.validate()
        self.config = config
        p = config.token_patch_size
        self.patch_embed = nn.Linear(p * p, config.encoder_dim)
        self.register_buffer("pos_enc", _sincos_2d(config.encoder_dim, config.grid), persistent=False)
        self.encoder = _blocks(config.encoder_dim, config.encoder_depth, config.heads)
        self.encoder_norm = nn.LayerNorm(config.encoder_dim)
        self.decoder_embed = nn.Linear(config.encoder_dim, config.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, config.decoder_dim))
        self.register_buffer("pos_dec", _sincos_2d(config.decoder_dim, config.grid), persistent=False)
        self.decoder = _blocks(config.decoder_dim, config.decoder_depth, config.heads)
        self.decoder_norm = nn.LayerNorm(config.decoder_dim)
        self.head = nn.Linear(config.decoder_dim, p * p)
        nn.init.normal_(self.mask_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W) -> (B, N, P*P)."""
        b, h, w = images.shape
        p = self.config.token_patch_size
        x = images.reshape(b, h // p, p, w // p, p).permute(0, 1, 3, 2, 4)
        return x.reshape(b, (h // p) * (w // p), p * p)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, _ = tokens.shape
        p, g = self.config.token_patch_size, self.config.grid
        x = tokens.reshape(b, g, g, p, p).permute(0, 1, 3, 2, 4)
        return x.reshape(b, g * p, g * p)

    def forward(self, images: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        """Predict every token's pixels given a boolean (B, N) mask of hidden tokens.

        The number of hidden tokens must be the same for every row.
        """
        tokens = self.patchify(images)
        b, n, _ = tokens.shape
        x = self.patch_embed(tokens) + self.pos_enc
        n_visible = int((~masked[0]).sum())
        order = torch.argsort(masked.to(torch.int8), dim=1, stable=True)  # visible first
        keep = order[:, :n_visible]
        x = torch.gather(x, 1, keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        x = self.encoder_norm(self.encoder(x))
        x = self.decoder_embed(x)
        full = self.mask_token.expand(b, n, -1).clone()
        full = full.scatter(1, keep.unsqueeze(-1).expand(-1, -1, full.shape[-1]), x)
        y = self.decoder_norm(self.decoder(full + self.pos_dec))
        return self.head(y)


def random_token_mask(n_tokens: int, ratio: float, generator: torch.Generator, batch: int = 1) -> torch.Tensor:
    """Boolean (batch, n_tokens) mask with exactly floor(ratio * n_tokens) hidden tokens per row."""
    n_masked = int(math.floor(ratio * n_tokens))
    out = torch.zeros(batch, n_tokens, dtype=torch.bool)
    for row in range(batch):
        out[row, torch.randperm(n_tokens, generator=generator)[:n_masked]] = True
    return out


@dataclass
class MaeWeights:
    config: MaeConfig
    state: dict[str, torch.Tensor]
    loss_history: list[float] = field(default_factory=list)

    def build(self) -> MaskedAutoencoder:
        model = MaskedAutoencoder(self.config)
        model.load_state_dict(self.state)
        model.eval()
        return model

    def save(self, path) -> None:
        meta = {"kind": "mae", "config": asdict(self.config), "loss_history": self.loss_history}
        io.save_checkpoint(path, {k: v.detach().cpu().numpy() for k, v in self.state.items()}, meta)

    @classmethod
    def load(cls, path) -> "MaeWeights":
        tensors, meta = io.load_checkpoint(path)
        if meta.get("kind") != "mae":
            raise ValidationError(f"{path}: not an MAE checkpoint")
        state = {k: torch.from_numpy(v.copy()) for k, v in tensors.items()}
        return cls(MaeConfig(**meta["config"]), state, list(meta.get("loss_history", [])))


def _stack(slices: Sequence[ImageSlice], size: int) -> torch.Tensor:
    for sl in slices:
        if sl.shape != (size, size):
            raise ValidationError(f"slice {sl.key} is {sl.shape}, MAE expects {size}x{size}")
    return torch.tensor(np.stack([sl.pixels for sl in slices]), dtype=torch.float32)


def masked_mse(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Pixel MSE averaged over hidden tokens only."""
    per_token = ((pred - target) ** 2).mean(dim=-1)
    return (per_token * masked).sum() / masked.sum()


def lesion_free(slices: Sequence[ImageSlice]) -> list[ImageSlice]:
    return [sl for sl in slices if not sl.mask.any()]


def train_mae(slices: Sequence[ImageSlice], config: MaeConfig, steps: int, loss_log=None) -> MaeWeights:
    """Adam on masked-token MSE, cycling through ``config.train_mask_ratios`` step by step.

    ``loss_history[0]`` is the loss of the first batch, computed before the first update.

    ``loss_log`` is an optional path; the loss curve is written there as JSON.
    """
    config.validate()
    if steps < 0:
        raise ConfigurationError(f"steps must be non-negative, got {steps}")
    if not slices:
        raise ConfigurationError("MAE training set is empty")
    data = _stack(slices, config.input_size)
    torch.manual_seed(config.seed)
    model = MaskedAutoencoder(config)
    weights = MaeWeights(config, {k: v.detach().clone() for k, v in model.state_dict().items()})
    if steps == 0:
        return weights

    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / max(1, steps // 10)))
    history = []
    model.train()
    for step in range(steps):
        idx = torch.randint(0, data.shape[0], (min(config.batch_size, data.shape[0]),), generator=gen)
        batch = data[idx]
        # cycle through the training ratios so every reconstruction ratio is seen
        ratio = config.train_mask_ratios[step % len(config.train_mask_ratios)]
        masked = random_token_mask(config.num_tokens, ratio, gen, batch.shape[0])
        pred = model(batch, masked)
        loss = masked_mse(pred, model.patchify(batch), masked)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
        if step % 50 == 0:
            log.info("mae step %d loss %.5f", step, history[-1])
    weights.state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    weights.loss_history = history
    if loss_log is not None:
        io.write_json_atomic(loss_log, {"step_loss": history})
    return weights


@torch.no_grad()
def evaluate_masked_mse(weights: MaeWeights, slices: Sequence[ImageSlice], seed: int = 1234) -> float:
    """Masked-token MSE of ``weights`` on ``slices`` under a fixed set of masks."""
    model = weights.build()
    data = _stack(slices, weights.config.input_size)
    gen = torch.Generator().manual_seed(seed)
    masked = random_token_mask(weights.config.num_tokens, weights.config.mask_ratio, gen, data.shape[0])
    return float(masked_mse(model(data, masked), model.patchify(data), masked))


# ----------------------------------------------------------- reconstruction


@dataclass
class Reconstruction:
    pixels: np.ndarray
    mask_ratio: float
    masked_token_indices: list[int]
    seed: int


def _reconstruct(model: MaskedAutoencoder, image: np.ndarray, ratio: float, seed: int) -> Reconstruction:
    cfg = model.config
    gen = torch.Generator().manual_seed(int(seed))
    masked = random_token_mask(cfg.num_tokens, ratio, gen)
    x = torch.tensor(image, dtype=torch.float32).unsqueeze(0)
    with torch.no_grad():
        pred = model(x, masked).clamp(0.0, 1.0)
    tokens = model.patchify(x)
    # visible tokens keep the input pixels exactly
    merged = torch.where(masked.unsqueeze(-1), pred, tokens)
    pixels = model.unpatchify(merged)[0].numpy()
    pixels = np.where(_token_pixel_mask(cfg, masked[0].numpy()), pixels, image)
    return Reconstruction(pixels, ratio, sorted(np.flatnonzero(masked[0].numpy()).tolist()), int(seed))


def _token_pixel_mask(cfg: MaeConfig, token_mask: np.ndarray) -> np.ndarray:
    grid = token_mask.reshape(cfg.grid, cfg.grid)
    return np.kron(grid, np.ones((cfg.token_patch_size, cfg.token_patch_size), dtype=bool)).astype(bool)


def _check_image(image: ImageSlice, cfg: MaeConfig) -> np.ndarray:
    if image.shape != (cfg.input_size, cfg.input_size):
        raise ValidationError(f"slice {image.key} is {image.shape}, MAE expects {cfg.input_size}x{cfg.input_size}")
    return image.pixels


def mae_reconstruct(image: ImageSlice, weights: MaeWeights | MaskedAutoencoder, mask_ratio: float, seed: int) -> Reconstruction:
    model = weights if isinstance(weights, MaskedAutoencoder) else weights.build()
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigurationError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    return _reconstruct(model, _check_image(image, model.config), mask_ratio, seed)


def average_reconstructions(image: ImageSlice, weights, mask_ratio: float, k: int, base_seed: int,
                            seeds: Sequence[int] | None = None) -> np.ndarray:
    """Mean of ``k`` reconstructions using seeds ``base_seed .. base_seed + k - 1``."""
    if k <= 0:
        raise ConfigurationError(f"k must be at least 1, got {k}")
    model = weights if isinstance(weights, MaskedAutoencoder) else weights.build()
    seeds = list(seeds) if seeds is not None else [base_seed + i for i in range(k)]
    if len(seeds) != k:
        raise ConfigurationError("explicit seed list must have length k")
    total = np.zeros(image.shape, dtype=np.float64)
    for s in seeds:
        total += mae_reconstruct(image, model, mask_ratio, s).pixels
    return total / k


# ----------------------------------------------------------------- residuals


def _gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def local_ssim(a: np.ndarray, b: np.ndarray, window: int = 7, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM with a Gaussian window (reflect padding)."""
    w = _gaussian_window(window)
    f = lambda x: ndimage.correlate(x, w, mode="reflect")  # noqa: E731
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a**2
    var_b = f(b * b) - mu_b**2
    cov = f(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def diff_map(image: np.ndarray, recon: np.ndarray, metric: str = "absdiff") -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if image.shape != recon.shape:
        raise ValidationError(f"image {image.shape} and reconstruction {recon.shape} shapes differ")
    if metric == "absdiff":
        return np.abs(image - recon)
    if metric == "mse":
        return (image - recon) ** 2
    if metric == "ssim":
        return np.clip(1.0 - local_ssim(image, recon), 0.0, 1.0)
    raise ConfigurationError(f"unknown diff metric {metric!r}; expected one of {DIFF_METRICS}")


@dataclass
class ResidualPair:
    rm1: np.ndarray
    rm2: np.ndarray
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    iterations: int = DEFAULT_ITERATIONS
    diff_metric: str = "absdiff"

    @property
    def shape(self):
        return self.rm1.shape


def generate_mrm(image: ImageSlice, weights, ratios: Sequence[float] = DEFAULT_RATIOS, k: int = DEFAULT_ITERATIONS,
                 metric: str = "absdiff", base_seed: int = 0) -> ResidualPair:
    """Residual maps at two mask ratios.  A single ratio fills both maps with the same residual."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) not in (1, 2):
        raise ConfigurationError(f"expected one or two mask ratios, got {ratios}")
    model = weights if isinstance(weights, MaskedAutoencoder) else weights.build()
    maps = [diff_map(image.pixels, average_reconstructions(image, model, r, k, base_seed), metric) for r in ratios]
    if len(maps) == 1:
        maps.append(maps[0].copy())
    return ResidualPair(maps[0].astype(np.float32), maps[1].astype(np.float32), ratios, k, metric)


def slice_seed(base_seed: int, sl: ImageSlice) -> int:
    """Stable per-slice seed derived from the slice identity."""
    digest = np.random.SeedSequence([base_seed, *sl.key.encode()]).generate_state(1)[0]
    return int(digest % (2**31 - 1))


class MrmStore:
    """Residual pairs keyed by slice identity, persisted as ``<key>.rm1`` / ``<key>.rm2`` raw arrays."""

    def __init__(self, pairs: dict[str, ResidualPair] | None = None):
        self.pairs = dict(pairs or {})

    def __getitem__(self, key: str) -> ResidualPair:
        try:
            return self.pairs[key]
        except KeyError:
            raise ValidationError(f"no residual maps stored for slice {key}") from None

    def __contains__(self, key):
        return key in self.pairs

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def build(cls, slices: Sequence[ImageSlice], weights, ratios=DEFAULT_RATIOS, k=DEFAULT_ITERATIONS,
              metric="absdiff", seed=0, workers: int = 1) -> "MrmStore":
        model = weights if isinstance(weights, MaskedAutoencoder) else weights.build()
        size = model.config.input_size
        from .synthdata import bilinear_resize, resize_slice

        def one(sl):
            src = resize_slice(sl, size) if sl.shape != (size, size) else sl
            pair = generate_mrm(src, model, ratios, k, metric, slice_seed(seed, sl))
            if src.shape != sl.shape:
                pair.rm1 = np.clip(bilinear_resize(pair.rm1, sl.shape), 0, None).astype(np.float32)
                pair.rm2 = np.clip(bilinear_resize(pair.rm2, sl.shape), 0, None).astype(np.float32)
            return sl.key, pair

        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(workers) as pool:
                items = list(pool.map(one, slices))
        else:
            items = [one(sl) for sl in slices]
        return cls(dict(items))

    def save(self, directory, splits: dict[str, str] | None = None) -> None:
        directory = Path(directory)
        meta = {}
        for key, pair in self.pairs.items():
            sub = directory / (splits.get(key, "") if splits else "")
            io.save_raw(sub / f"{key}.rm1", pair.rm1)
            io.save_raw(sub / f"{key}.rm2", pair.rm2)
            meta[key] = {"dir": str(sub.relative_to(directory)), "ratios": list(pair.ratios),
                         "iterations": pair.iterations, "diff_metric": pair.diff_metric}
        io.write_json_atomic(directory / "mrm_index.json", meta)

    @classmethod
    def load(cls, directory) -> "MrmStore":
        directory = Path(directory)
        index_path = directory / "mrm_index.json"
        if not index_path.is_file():
            raise FileNotFoundError(f"missing residual map index {index_path}")
        meta = json.loads(index_path.read_text())
        pairs = {}
        for key, m in meta.items():
            sub = directory / m["dir"]
            pairs[key] = ResidualPair(io.load_raw(sub / f"{key}.rm1"), io.load_raw(sub / f"{key}.rm2"),
                                      tuple(m["ratios"]), m["iterations"], m["diff_metric"])
        return cls(pairs)
