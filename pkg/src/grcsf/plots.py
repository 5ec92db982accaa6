"""Static figures for ablation results: metric bars, lesion-size breakdown and overlay panels."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import ndimage  # noqa: E402

from . import io  # noqa: E402
from .errors import ConfigurationError, ValidationError  # noqa: E402

SIZE_BINS = ((1, 10), (11, 100), (101, 1000), (1001, None))
GT_COLOR = (0.0, 1.0, 0.0)
PRED_COLOR = (1.0, 0.0, 0.0)


def bin_label(lo: int, hi: int | None) -> str:
    return f">{lo - 1}" if hi is None else f"{lo}-{hi}"


def size_bin(size: int) -> int:
    for i, (lo, hi) in enumerate(SIZE_BINS):
        if size >= lo and (hi is None or size <= hi):
            return i
    raise ValidationError(f"lesion size {size} is not positive")


def seed_points(results) -> dict[str, list[tuple[int, dict]]]:
    """Per label, the (seed, metrics) pairs of successful runs in plan order."""
    out: dict[str, list] = {}
    for r in results.records:
        out.setdefault(r["label"], [])
        if r["status"] == "ok":
            out[r["label"]].append((r["seed"], r["metrics"]))
    return out


def size_breakdown(results) -> tuple[list[str], dict[str, list[float]]]:
    """Mean lesion Dice per size bin and label.  Bins without any lesion are dropped."""
    per_label: dict[str, list[list[float]]] = {}
    for r in results.records:
        bins = per_label.setdefault(r["label"], [[] for _ in SIZE_BINS])
        for size, dice in r.get("lesions", []) if r["status"] == "ok" else []:
            bins[size_bin(int(size))].append(float(dice))
    keep = [i for i in range(len(SIZE_BINS)) if any(b[i] for b in per_label.values())]
    labels = [bin_label(*SIZE_BINS[i]) for i in keep]
    table = {name: [float(np.mean(b[i])) if b[i] else float("nan") for i in keep] for name, b in per_label.items()}
    return labels, table


def contour(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels of a binary mask: foreground pixels with a 4-neighbour outside the mask."""
    mask = np.asarray(mask) > 0
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def overlay_rgb(image: np.ndarray, gt: np.ndarray, pred: np.ndarray | None = None) -> np.ndarray:
    """Grayscale image with the ground-truth contour in green and the prediction contour in red."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rgb = np.repeat(image[..., None], 3, axis=-1)
    if pred is not None:
        rgb[contour(pred)] = PRED_COLOR
    rgb[contour(gt)] = GT_COLOR
    return rgb


def _save(fig, path: Path) -> Path:
    with io.atomic_path(path) as tmp:
        fig.savefig(tmp, format=path.suffix.lstrip(".") or "png", dpi=100)
    plt.close(fig)
    return path


def plot_metric_bars(results, path, metrics=("dice", "iou")) -> Path:
    points = seed_points(results)
    labels = list(points)
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 + 1.2 * len(labels), 3.5), squeeze=False)
    x = np.arange(len(labels))
    for ax, metric in zip(axes[0], metrics):
        means = [np.mean([m[metric] for _, m in points[l]]) if points[l] else np.nan for l in labels]
        ax.bar(x, means, color="0.75", edgecolor="0.3")
        for i, label in enumerate(labels):
            vals = [m[metric] for _, m in points[label]]
            ax.scatter(np.full(len(vals), x[i]), vals, color="k", s=12, zorder=3)
        ax.set_xticks(x, labels, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel(metric)
        ax.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_size_breakdown(results, path) -> Path:
    bins, table = size_breakdown(results)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.8 / max(len(table), 1)
    for j, (label, vals) in enumerate(table.items()):
        ax.bar(np.arange(len(bins)) + j * width, vals, width, label=label)
    ax.set_xticks(np.arange(len(bins)) + 0.4 - width / 2, bins)
    ax.set_xlabel("lesion size (pixels)")
    ax.set_ylabel("lesion Dice")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray, rm1=None, rm2=None, path="overlay.png",
                 title: str = "") -> Path:
    panels = [("image", image, "gray"), ("overlay", overlay_rgb(image, gt, pred), None)]
    if rm1 is not None:
        panels.append(("rm1", rm1, "magma"))
    if rm2 is not None:
        panels.append(("rm2", rm2, "magma"))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.8))
    for ax, (name, data, cmap) in zip(np.atleast_1d(axes), panels):
        ax.imshow(data, cmap=cmap, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, Path(path))


def emit_plots(results, out_dir, overlays=None) -> list[Path]:
    """Write the metric bar chart, the size breakdown and optional overlay panels into ``out_dir``.

    ``overlays`` is an iterable of ``(slice, predicted mask, residual pair or None)``.
    """
    if results is None or not results.records:
        raise ConfigurationError("no ablation results to plot")
    out_dir = Path(out_dir)
    paths = [plot_metric_bars(results, out_dir / "metrics_bar.png")]
    bins, _ = size_breakdown(results)
    if bins:
        paths.append(plot_size_breakdown(results, out_dir / "lesion_size.png"))
    for sl, pred, pair in overlays or ():
        rm1 = pair.rm1 if pair is not None else None
        rm2 = pair.rm2 if pair is not None else None
        paths.append(plot_overlay(sl.pixels, sl.mask, pred, rm1, rm2, out_dir / f"overlay_{sl.key}.png", sl.key))
    return paths
