"""Synthetic low-contrast lesion phantoms, dataset manifests and slice resizing."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .errors import ConfigurationError, ValidationError

SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1

# HU calibration of the synthetic CT channel.
HU_THRESHOLD = 130.0
HU_BACKGROUND_RANGE = (-100.0, 130.0)
HU_LESION_FLOOR = 131.0


@dataclass
class SynthConfig:
    image_size: int = 64
    n_train: int = 400
    n_val: int = 50
    n_test: int = 50
    n_patients: int = 20
    lesion_contrast: float = 0.08
    lesion_radius_range: tuple[float, float] = (1.5, 3.5)
    lesions_per_slice_range: tuple[int, int] = (0, 2)
    background_texture_scale: float = 3.0
    texture_amplitude: float = 0.06
    pixel_noise: float = 0.015
    hu_mode: bool = False
    patch_multiple: int = 8
    seed: int = 0

    def __post_init__(self):
        self.lesion_radius_range = tuple(float(v) for v in self.lesion_radius_range)
        self.lesions_per_slice_range = tuple(int(v) for v in self.lesions_per_slice_range)

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_multiple <= 0 or self.image_size % self.patch_multiple:
            raise ConfigurationError(
                f"image_size {self.image_size} must be a positive multiple of {self.patch_multiple}"
            )
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.n_train + self.n_val + self.n_test == 0:
            raise ConfigurationError("dataset would be empty")
        if self.n_patients < sum(n > 0 for n in (self.n_train, self.n_val, self.n_test)):
            raise ConfigurationError("need at least one patient per non-empty split")
        if not 0.0 <= self.lesion_contrast <= 1.0:
            raise ConfigurationError("lesion_contrast must lie in [0, 1]")
        lo, hi = self.lesion_radius_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"lesion_radius_range {self.lesion_radius_range} is empty or non-positive")
        lo, hi = self.lesions_per_slice_range
        if not 0 <= lo <= hi:
            raise ConfigurationError(f"lesions_per_slice_range {self.lesions_per_slice_range} is empty")
        if self.background_texture_scale <= 0:
            raise ConfigurationError("background_texture_scale must be positive")


@dataclass
class ImageSlice:
    pixels: np.ndarray
    mask: np.ndarray
    hu: np.ndarray | None = None
    patient_id: str = ""
    slice_index: int = 0
    split: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.pixels.ndim != 2:
            raise ValidationError(f"pixels must be 2D, got {self.pixels.shape}")
        if self.pixels.shape != self.mask.shape:
            raise ValidationError(f"{self.key}: image {self.pixels.shape} and mask {self.mask.shape} differ")
        if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValidationError(f"{self.key}: pixels must be finite and in [0, 1]")
        if np.any(self.mask > 1):
            raise ValidationError(f"{self.key}: mask values must be 0 or 1")
        if self.hu is not None:
            self.hu = np.asarray(self.hu, dtype=np.float32)
            if self.hu.shape != self.pixels.shape:
                raise ValidationError(f"{self.key}: HU channel {self.hu.shape} differs from image")

    @property
    def key(self) -> str:
        return f"{self.patient_id}_s{self.slice_index:03d}"

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class ManifestEntry:
    image: str
    mask: str
    patient_id: str
    slice_index: int
    split: str = "train"
    hu: str | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    normalization: dict = field(default_factory=lambda: {"low": 0.0, "high": float(io.PNG_LEVELS)})
    format_version: int = MANIFEST_VERSION
    root: Path | None = None

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: manifest is not valid JSON ({exc})") from exc
        if doc.get("format_version") != MANIFEST_VERSION:
            raise ValidationError(f"{path}: unsupported manifest version {doc.get('format_version')}")
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        return cls(entries=entries, normalization=doc["normalization"], root=path.parent)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "normalization": self.normalization,
            "entries": [asdict(e) for e in self.entries],
        }

    def check_splits(self) -> None:
        owner = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValidationError(f"entry {e.image}: unknown split {e.split!r}")
            if owner.setdefault(e.patient_id, e.split) != e.split:
                raise ValidationError(f"patient {e.patient_id} spans splits {owner[e.patient_id]} and {e.split}")


# ------------------------------------------------------------------ resizing


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear weights with align-corners sampling."""
    a = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    a[np.arange(n_out), lo] = 1.0 - frac
    a[np.arange(n_out), lo + 1] += frac
    return a


def bilinear_resize(array: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    h, w = array.shape
    if (h, w) == tuple(target):
        return array.copy()
    return _interp_matrix(h, target[0]) @ array @ _interp_matrix(w, target[1]).T


def nearest_resize(array: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    array = np.asarray(array)
    h, w = array.shape

    def idx(n_in, n_out):
        if n_out == 1:
            return np.zeros(1, dtype=int)
        return np.rint(np.arange(n_out) * (n_in - 1) / (n_out - 1)).astype(int)

    return array[np.ix_(idx(h, target[0]), idx(w, target[1]))]


def resize_slice(sl: ImageSlice, target: int | tuple[int, int]) -> ImageSlice:
    """Bilinear (align-corners) resize of pixels/HU, nearest-neighbour resize of the mask."""
    if isinstance(target, int):
        target = (target, target)
    if min(target) <= 0:
        raise ConfigurationError(f"resize target must be positive, got {target}")
    if tuple(target) == sl.shape:
        return ImageSlice(sl.pixels.copy(), sl.mask.copy(), None if sl.hu is None else sl.hu.copy(),
                          sl.patient_id, sl.slice_index, sl.split)
    pixels = np.clip(bilinear_resize(sl.pixels, target), 0.0, 1.0)
    hu = None if sl.hu is None else bilinear_resize(sl.hu, target)
    return ImageSlice(pixels, nearest_resize(sl.mask, target), hu, sl.patient_id, sl.slice_index, sl.split)


# ---------------------------------------------------------------- generation


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _patient_anatomy(cfg: SynthConfig, patient: int) -> dict:
    rng = np.random.default_rng([cfg.seed, 7, patient])
    n = cfg.image_size
    return {
        "center": (n / 2 + rng.uniform(-2, 2), n / 2 + rng.uniform(-2, 2)),
        "axes": (n * rng.uniform(0.36, 0.42), n * rng.uniform(0.40, 0.46)),
        "tissue": rng.uniform(0.35, 0.42),
        "shell": rng.uniform(0.70, 0.78),
        "thickness": rng.uniform(2.5, 3.5),
    }


def _render_slice(cfg: SynthConfig, anatomy: dict, patient: int, index: int):
    n = cfg.image_size
    rng = np.random.default_rng([cfg.seed, 11, patient, index])
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    # slow drift of the shell along the slice axis
    drift = 1.0 + 0.04 * math.sin(index / 4.0)
    cy, cx = anatomy["center"]
    ay, ax = anatomy["axes"][0] * drift, anatomy["axes"][1] * drift
    r = np.sqrt(((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2)
    mean_axis = 0.5 * (ay + ax)
    dist = (r - 1.0) * mean_axis  # signed pixel distance to the shell midline

    background = np.full((n, n), 0.08)
    inside = 1.0 / (1.0 + np.exp(dist / 0.75))
    background += (anatomy["tissue"] - 0.08) * inside
    background += (anatomy["shell"] - anatomy["tissue"]) * np.exp(-0.5 * (dist / (anatomy["thickness"] / 2)) ** 2)

    texture = np.zeros((n, n))
    for octave in range(3):
        texture += _smooth_noise(rng, n, cfg.background_texture_scale * 2**octave) / 2**octave
    pixels = background + cfg.texture_amplitude * texture * inside
    pixels += cfg.pixel_noise * rng.standard_normal((n, n))

    mask = np.zeros((n, n), dtype=np.uint8)
    lo, hi = cfg.lesions_per_slice_range
    n_lesions = int(rng.integers(lo, hi + 1))
    profile_total = np.zeros((n, n))
    for _ in range(n_lesions):
        radius = rng.uniform(*cfg.lesion_radius_range)
        aspect = rng.uniform(0.7, 1.3)
        theta = rng.uniform(0, math.pi)
        # keep lesions well inside the tissue region
        rho = rng.uniform(0, 0.65)
        phi = rng.uniform(0, 2 * math.pi)
        ly, lx = cy + rho * ay * math.sin(phi), cx + rho * ax * math.cos(phi)
        dy, dx = yy - ly, xx - lx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        ry, rx = radius * aspect, radius / aspect
        lesion_r = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
        edge = (lesion_r - 1.0) * radius
        profile = np.where(edge <= 0, 1.0, np.exp(-0.5 * edge**2))
        inside_lesion = edge <= 0
        inside_lesion[int(round(ly)), int(round(lx))] = True
        mask |= inside_lesion.astype(np.uint8)
        profile_total = np.maximum(profile_total, profile)
    pixels = np.clip(pixels + cfg.lesion_contrast * profile_total, 0.0, 1.0)

    hu = None
    if cfg.hu_mode:
        lo_hu, hi_hu = HU_BACKGROUND_RANGE
        hu = np.clip(lo_hu + (hi_hu - lo_hu) * pixels, lo_hu, hi_hu)
        hu = np.where(mask > 0, HU_LESION_FLOOR + 400.0 * pixels, hu)
    return pixels.astype(np.float32), mask, None if hu is None else hu.astype(np.float32)


def _allocate_patients(cfg: SynthConfig) -> dict[str, list[int]]:
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    total = sum(counts.values())
    alloc = {}
    for split in ("val", "test"):
        alloc[split] = 0 if counts[split] == 0 else max(1, round(cfg.n_patients * counts[split] / total))
    alloc["train"] = cfg.n_patients - alloc["val"] - alloc["test"]
    if counts["train"] and alloc["train"] < 1:
        raise ConfigurationError("not enough patients for a train split")
    patients, start = {}, 0
    for split in SPLITS:
        patients[split] = list(range(start, start + alloc[split]))
        start += alloc[split]
    return patients


def generate_synthetic_dataset(config: SynthConfig) -> tuple[list[ImageSlice], list[ImageSlice], list[ImageSlice]]:
    """Deterministic train/val/test phantoms with patient-disjoint splits."""
    config.validate()
    patients = _allocate_patients(config)
    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    out = {}
    for split in SPLITS:
        slices = []
        pids = patients[split]
        for k in range(counts[split]):
            patient = pids[k % len(pids)]
            index = k // len(pids)
            pixels, mask, hu = _render_slice(config, _patient_anatomy(config, patient), patient, index)
            slices.append(ImageSlice(pixels, mask, hu, f"p{patient:03d}", index, split))
        out[split] = slices
    return out["train"], out["val"], out["test"]


# ------------------------------------------------------------------- disk I/O


def write_dataset(root, splits: dict[str, list[ImageSlice]]) -> Path:
    """Write slices as 16-bit PNGs (plus optional raw HU) and a manifest.json under ``root``."""
    root = Path(root)
    entries = []
    for split, slices in splits.items():
        for sl in slices:
            stem = f"{split}/{sl.key}"
            io.save_png16(root / f"{stem}.png", sl.pixels)
            io.save_png16(root / f"{stem}_mask.png", sl.mask.astype(np.float64))
            hu_name = None
            if sl.hu is not None:
                hu_name = f"{stem}.hu"
                io.save_raw(root / hu_name, sl.hu)
            entries.append(ManifestEntry(f"{stem}.png", f"{stem}_mask.png", sl.patient_id, sl.slice_index, split, hu_name))
    manifest = DatasetManifest(entries)
    manifest.check_splits()
    io.write_json_atomic(root / "manifest.json", manifest.to_dict())
    return root / "manifest.json"


def load_dataset(manifest: DatasetManifest | str | Path) -> list[ImageSlice]:
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    manifest.check_splits()
    root = manifest.root or Path(".")
    low = float(manifest.normalization.get("low", 0.0))
    high = float(manifest.normalization.get("high", io.PNG_LEVELS))
    if high <= low:
        raise ValidationError(f"normalization window [{low}, {high}] is empty")
    slices = []
    for e in manifest.entries:
        for rel in (e.image, e.mask, e.hu):
            if rel is not None and not (root / rel).is_file():
                raise FileNotFoundError(f"manifest entry {e.patient_id}/{e.slice_index}: missing file {root / rel}")
        raw = io.load_png16(root / e.image)
        mask_raw = io.load_png16(root / e.mask)
        if raw.shape != mask_raw.shape:
            raise ValidationError(
                f"entry {e.image}: image {raw.shape} and mask {mask_raw.shape} shapes differ"
            )
        pixels = np.clip((raw - low) / (high - low), 0.0, 1.0)
        hu = io.load_raw(root / e.hu) if e.hu else None
        slices.append(ImageSlice(pixels, (mask_raw > 0).astype(np.uint8), hu, e.patient_id, e.slice_index, e.split))
    return slices


def split_slices(slices: list[ImageSlice]) -> dict[str, list[ImageSlice]]:
    out = {s: [] for s in SPLITS}
    for sl in slices:
        out.setdefault(sl.split or "train", []).append(sl)
    return out
