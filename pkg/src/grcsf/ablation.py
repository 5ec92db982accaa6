"""Ablation runs: train and score model variants over seeds and residual-map settings."""

from __future__ import annotations

import csv
import hashlib
import io as _io
import itertools
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import io
from .backbone import ModelConfig, TrainConfig, build_model, predict_mask, train
from .errors import ConfigurationError, GrcsfError
from .metrics import METRIC_NAMES, compute_metrics
from .residual_map import DEFAULT_ITERATIONS, DEFAULT_RATIOS, DIFF_METRICS, MrmStore

log = logging.getLogger(__name__)

DEFAULT_VARIANTS: tuple[tuple[str, dict], ...] = (
    ("baseline", {"enable_gcu": False, "enable_rcu": False}),
    ("gcu", {"enable_rcu": False}),
    ("gcu_rcu_no_importance", {"enable_importance": False}),
    ("grcsf", {}),
)
DEFAULT_SEEDS = (1, 2, 3)
MODEL_FIELDS = {f.name for f in fields(ModelConfig)}

_build_lock = threading.Lock()


@dataclass
class AblationPlan:
    variants: list = field(default_factory=lambda: [(n, dict(o)) for n, o in DEFAULT_VARIANTS])
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    mae_iterations: list = field(default_factory=lambda: [DEFAULT_ITERATIONS])
    ratio_sets: list = field(default_factory=lambda: [DEFAULT_RATIOS])
    patch_size_sets: list = field(default_factory=list)
    diff_metrics: list = field(default_factory=lambda: ["absdiff"])

    def __post_init__(self):
        self.variants = [(str(n), dict(o)) for n, o in self.variants]
        self.seeds = [int(s) for s in self.seeds]
        self.mae_iterations = [int(k) for k in self.mae_iterations]
        self.ratio_sets = [tuple(float(r) for r in rs) for rs in self.ratio_sets]
        self.patch_size_sets = [tuple(int(p) for p in ps) for ps in self.patch_size_sets]
        self.diff_metrics = [str(m) for m in self.diff_metrics]

    def validate(self) -> None:
        if not self.variants:
            raise ConfigurationError("ablation plan has no variants")
        if not self.seeds:
            raise ConfigurationError("ablation plan has no seeds")
        names = [n for n, _ in self.variants]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate variant names in {names}")
        for name, overrides in self.variants:
            unknown = set(overrides) - MODEL_FIELDS
            if unknown:
                raise ConfigurationError(f"variant {name}: unknown model fields {sorted(unknown)}")
            if "seed" in overrides:
                raise ConfigurationError(f"variant {name}: seeds are set by the plan, not by variants")
        if not self.mae_iterations or min(self.mae_iterations) < 1:
            raise ConfigurationError("mae_iterations must be a nonempty list of positive counts")
        if not self.ratio_sets or any(len(r) not in (1, 2) for r in self.ratio_sets):
            raise ConfigurationError("each ratio set needs one or two mask ratios")
        bad = set(self.diff_metrics) - set(DIFF_METRICS)
        if not self.diff_metrics or bad:
            raise ConfigurationError(f"diff_metrics must be a nonempty subset of {DIFF_METRICS}")

    def to_dict(self) -> dict:
        return {
            "variants": [[n, o] for n, o in self.variants],
            "seeds": self.seeds,
            "mae_iterations": self.mae_iterations,
            "ratio_sets": [list(r) for r in self.ratio_sets],
            "patch_size_sets": [list(p) for p in self.patch_size_sets],
            "diff_metrics": self.diff_metrics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AblationPlan":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown ablation plan keys {sorted(unknown)}")
        return cls(**data)

    def plan_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class MrmSetting:
    k: int
    ratios: tuple
    metric: str

    def tag(self) -> str:
        return f"k={self.k},ratios={'/'.join(f'{r:g}' for r in self.ratios)},metric={self.metric}"


@dataclass
class RunSpec:
    label: str
    variant: str
    seed: int
    overrides: dict
    mrm: MrmSetting
    model_config: ModelConfig


def config_diff(a, b) -> dict:
    """Fields whose values differ between two dataclass instances, as ``{name: (a, b)}``."""
    da, db = asdict(a), asdict(b)
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def expand_plan(plan: AblationPlan, base: ModelConfig) -> list[RunSpec]:
    """One spec per (variant, sweep point, seed), with isolation checked by config diffing."""
    plan.validate()
    settings = [MrmSetting(k, r, m) for k, r, m in itertools.product(plan.mae_iterations, plan.ratio_sets,
                                                                       plan.diff_metrics)]
    patch_sets = plan.patch_size_sets or [None]
    multi_mrm, multi_patch = len(settings) > 1, len(patch_sets) > 1
    specs = []
    for name, overrides in plan.variants:
        for setting, patches in itertools.product(settings, patch_sets):
            declared = dict(overrides)
            if patches is not None:
                declared["rcu_patch_sizes"] = patches
            parts = []
            if multi_mrm:
                parts.append(setting.tag())
            if multi_patch:
                parts.append("patch=" + "/".join(map(str, patches)))
            label = f"{name}[{';'.join(parts)}]" if parts else name
            for seed in plan.seeds:
                cfg = replace(base, **declared, seed=seed)
                drift = set(config_diff(base, cfg)) - set(declared) - {"seed"}
                if drift:
                    raise ConfigurationError(f"variant {label} changes undeclared fields {sorted(drift)}")
                specs.append(RunSpec(label, name, seed, declared, setting, cfg))
    return specs


def lesion_records(pred: np.ndarray, gt: np.ndarray) -> list[tuple[int, float]]:
    """Per ground-truth lesion: (pixel count, Dice against the predicted components touching it)."""
    out = []
    gt_lab, n_gt = ndimage.label(gt > 0)
    pred_lab, _ = ndimage.label(pred > 0)
    for lesion in range(1, n_gt + 1):
        region = gt_lab == lesion
        touching = np.unique(pred_lab[region & (pred_lab > 0)])
        matched = np.isin(pred_lab, touching) & (pred_lab > 0)
        inter = np.count_nonzero(region & matched)
        size = int(region.sum())
        out.append((size, 2.0 * inter / (size + np.count_nonzero(matched))))
    return out


@dataclass
class AblationResults:
    plan: AblationPlan
    records: list[dict]

    def table(self) -> list[dict]:
        """Mean and standard deviation over seeds per label, in plan order."""
        rows = []
        labels = list(dict.fromkeys(r["label"] for r in self.records))
        for label in labels:
            runs = [r for r in self.records if r["label"] == label]
            ok = [r for r in runs if r["status"] == "ok"]
            row = {"label": label, "variant": runs[0]["variant"], "n_runs": len(ok), "n_failed": len(runs) - len(ok)}
            for m in METRIC_NAMES:
                vals = [r["metrics"][m] for r in ok]
                row[f"{m}_mean"] = float(np.mean(vals)) if vals else float("nan")
                row[f"{m}_std"] = float(np.std(vals)) if vals else float("nan")
            if len(ok) < len(runs):
                row["error"] = next(r["error"] for r in runs if r["status"] != "ok")
            rows.append(row)
        return rows

    def mean(self, label: str, metric: str = "dice") -> float:
        for row in self.table():
            if row["label"] == label:
                return row[f"{metric}_mean"]
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {"plan": self.plan.to_dict(), "table": self.table(), "runs": self.records}

    def table_csv(self) -> str:
        rows = self.table()
        cols = ["label", "variant", "n_runs", "n_failed"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "variant", "seed", "status", *METRIC_NAMES])
        for r in self.records:
            vals = [repr(r["metrics"][m]) for m in METRIC_NAMES] if r["status"] == "ok" else [""] * len(METRIC_NAMES)
            writer.writerow([r["label"], r["variant"], r["seed"], r["status"], *vals])
        return buf.getvalue()

    def save(self, directory) -> Path:
        directory = Path(directory)
        io.write_json_atomic(directory / "results.json", self.to_dict())
        io.write_text_atomic(directory / "results.csv", self.table_csv())
        io.write_text_atomic(directory / "runs.csv", self.runs_csv())
        return directory

    @classmethod
    def load(cls, path) -> "AblationResults":
        path = Path(path)
        if path.is_dir():
            path = path / "results.json"
        data = json.loads(path.read_text())
        return cls(AblationPlan.from_dict(data["plan"]), data["runs"])


def run_directory(root, plan: AblationPlan) -> Path:
    """``<root>/<UTC timestamp>_<plan hash>``."""
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    return Path(root) / f"{stamp}_{plan.plan_hash()}"


def run_ablation(plan: AblationPlan, dataset: Sequence, mae_weights=None, base_config: ModelConfig | None = None,
                 train_config: TrainConfig | None = None, mrm_stores: dict | None = None, mrm_seed: int = 0,
                 workers: int = 1, out_dir=None) -> AblationResults:
    """Train and evaluate every (variant, sweep point, seed) of ``plan``.

    ``dataset`` is ``(train, val, test)``.  Residual maps are built once per residual setting from
    ``mae_weights`` unless supplied in ``mrm_stores`` (keyed by :class:`MrmSetting`).  Variants that
    fail validation are recorded with ``status == "error"`` and the remaining runs continue.
    """
    base = base_config or ModelConfig()
    train_config = train_config or TrainConfig()
    train_s, val_s, test_s = dataset
    if not test_s:
        raise ConfigurationError("ablation needs a nonempty test split")
    specs = expand_plan(plan, base)
    stores = dict(mrm_stores or {})
    for setting in dict.fromkeys(s.mrm for s in specs):
        needs = any(s.model_config.enable_rcu for s in specs if s.mrm == setting)
        if needs and setting not in stores:
            if mae_weights is None:
                raise ConfigurationError(f"residual maps for {setting.tag()} need MAE weights")
            log.info("building residual maps %s", setting.tag())
            stores[setting] = MrmStore.build(list(train_s) + list(val_s) + list(test_s), mae_weights, setting.ratios,
                                             setting.k, setting.metric, mrm_seed, workers)

    def run(spec: RunSpec) -> dict:
        record = {"label": spec.label, "variant": spec.variant, "seed": spec.seed, "overrides": spec.overrides,
                  "mrm": {"k": spec.mrm.k, "ratios": list(spec.mrm.ratios), "metric": spec.mrm.metric}}
        try:
            spec.model_config.validate()
            with _build_lock:
                model = build_model(spec.model_config)
            store = stores.get(spec.mrm)
            result = train(model, train_s, val_s, store, replace(train_config, seed=spec.seed))
            pred = predict_mask(result.model, test_s, store)
        except GrcsfError as exc:
            log.warning("run %s seed %d failed: %s", spec.label, spec.seed, exc)
            return {**record, "status": "error", "error": str(exc)}
        gt = np.stack([s.mask for s in test_s])
        report = compute_metrics(pred, gt, [s.patient_id for s in test_s])
        lesions = [list(l) for p, g in zip(pred, gt) for l in lesion_records(p, g)]
        log.info("run %s seed %d dice %.4f", spec.label, spec.seed, report.dice)
        return {**record, "status": "ok", "metrics": report.summary(), "per_patient": report.per_patient,
                "best_epoch": result.best_epoch, "epochs": len(result.history), "lesions": lesions}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(run, specs))
    else:
        records = [run(s) for s in specs]
    results = AblationResults(plan, records)
    if out_dir is not None:
        results.save(out_dir)
    return results
