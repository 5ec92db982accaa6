"""Per-patient overlap metrics and calcium component scoring."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ValidationError

METRIC_NAMES = ("dice", "iou", "precision", "recall", "fpr", "vose")
HU_CALCIUM_THRESHOLD = 130.0


def _ratio(num: float, den: float, empty: float) -> float:
    # 0/0 takes the convention value; a positive numerator never meets a zero denominator here
    return float(num) / float(den) if den else empty


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, fn, tn


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> dict[str, float]:
    return {
        "dice": _ratio(2 * tp, 2 * tp + fp + fn, 1.0),
        "iou": _ratio(tp, tp + fp + fn, 1.0),
        "precision": _ratio(tp, tp + fp, 1.0),
        "recall": _ratio(tp, tp + fn, 1.0),
        "fpr": _ratio(fp, fp + tn, 0.0),
        "vose": _ratio(fp, tp + fn, 0.0),
    }


@dataclass
class MetricsReport:
    dice: float
    iou: float
    precision: float
    recall: float
    fpr: float
    vose: float
    per_patient: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_csv(self) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["patient_id", *METRIC_NAMES])
        for pid in sorted(self.per_patient):
            writer.writerow([pid, *(repr(self.per_patient[pid][k]) for k in METRIC_NAMES)])
        return buf.getvalue()


def compute_metrics(pred_masks, gt_masks, patient_ids: Sequence[str] | None = None) -> MetricsReport:
    """Pixel-wise metrics pooled per patient, then averaged over patients (unweighted).

    ``pred_masks``/``gt_masks`` are stacks ``(S, H, W)`` (or a single 2D mask);
    ``patient_ids`` gives the owner of each slice.
    """
    pred = np.asarray(pred_masks)
    gt = np.asarray(gt_masks)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if patient_ids is None:
        patient_ids = ["all"] * pred.shape[0]
    patient_ids = list(patient_ids)
    if len(patient_ids) != pred.shape[0]:
        raise ValidationError(f"{len(patient_ids)} patient ids for {pred.shape[0]} slices")
    if not patient_ids:
        raise ConfigurationError("no patients to evaluate")
    groups: dict[str, list[int]] = {}
    for k, pid in enumerate(patient_ids):
        groups.setdefault(str(pid), []).append(k)
    per_patient = {}
    for pid, idx in groups.items():
        per_patient[pid] = metrics_from_counts(*confusion_counts(pred[idx], gt[idx]))
    means = {k: float(np.mean([m[k] for m in per_patient.values()])) for k in METRIC_NAMES}
    return MetricsReport(**means, per_patient=dict(sorted(per_patient.items())))


# ------------------------------------------------------------------ calcium

SIX_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


def calcium_postprocess(pred_mask: np.ndarray, hu: np.ndarray, threshold: float = HU_CALCIUM_THRESHOLD) -> np.ndarray:
    """Label 6-connected components of predicted voxels with HU strictly above ``threshold``.

    Labels are 1..n, numbered by each component's first voxel in C (raster) order.
    """
    pred_mask = np.asarray(pred_mask).astype(bool)
    hu = np.asarray(hu)
    if pred_mask.shape != hu.shape or pred_mask.ndim != 3:
        raise ValidationError(f"mask {pred_mask.shape} and HU {hu.shape} must be equal 3D shapes")
    keep = pred_mask & (hu > threshold)
    labels, n = ndimage.label(keep, structure=SIX_CONNECTIVITY)
    if n == 0:
        return labels.astype(np.int32)
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    firsts = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(firsts, flat[nz], nz)
    order = np.argsort(firsts[1:], kind="stable") + 1
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order] = np.arange(1, n + 1, dtype=np.int32)
    return remap[labels]


@dataclass
class CalciumReport:
    f1_vol: float
    sens_vol: float
    ppv_vol: float
    sens_lesion: float
    ppv_lesion: float
    components_pred: int
    components_gt: int
    tp_volume: float = 0.0
    pred_volume: float = 0.0
    gt_volume: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def calcium_score_eval(pred_labels: np.ndarray, gt_labels: np.ndarray, voxel_volume: float = 1.0) -> CalciumReport:
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValidationError(f"label volumes differ: {pred_labels.shape} vs {gt_labels.shape}")
    p, g = pred_labels > 0, gt_labels > 0
    tp_vol = np.count_nonzero(p & g) * voxel_volume
    pred_vol = np.count_nonzero(p) * voxel_volume
    gt_vol = np.count_nonzero(g) * voxel_volume
    sens_vol = _ratio(tp_vol, gt_vol, 1.0)
    ppv_vol = _ratio(tp_vol, pred_vol, 1.0)
    f1_vol = _ratio(2 * sens_vol * ppv_vol, sens_vol + ppv_vol, 0.0)
    n_pred = int(pred_labels.max(initial=0))
    n_gt = int(gt_labels.max(initial=0))
    gt_ids = set(np.unique(gt_labels[p & g]).tolist())
    pred_ids = set(np.unique(pred_labels[p & g]).tolist())
    gt_present = set(np.unique(gt_labels[g]).tolist())
    pred_present = set(np.unique(pred_labels[p]).tolist())
    return CalciumReport(
        f1_vol=f1_vol,
        sens_vol=sens_vol,
        ppv_vol=ppv_vol,
        sens_lesion=_ratio(len(gt_ids), len(gt_present), 1.0),
        ppv_lesion=_ratio(len(pred_ids), len(pred_present), 1.0),
        components_pred=n_pred,
        components_gt=n_gt,
        tp_volume=float(tp_vol),
        pred_volume=float(pred_vol),
        gt_volume=float(gt_vol),
    )
