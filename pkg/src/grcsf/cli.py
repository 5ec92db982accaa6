"""Command-line entry point: ``grcsf <command> [--config c.json] [--set section.key=value ...]``.

Exit codes: 0 on success, 1 on configuration, validation or usage errors, 2 on I/O errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import io
from .ablation import AblationPlan, AblationResults, MrmSetting, run_ablation, run_directory
from .backbone import ModelConfig, TrainConfig, build_model, load_model, predict_mask, save_model, train
from .errors import ConfigurationError, GrcsfError, ValidationError
from .metrics import calcium_postprocess, calcium_score_eval, compute_metrics, HU_CALCIUM_THRESHOLD
from .plots import emit_plots
from .residual_map import (
    DEFAULT_ITERATIONS,
    DEFAULT_RATIOS,
    DIFF_METRICS,
    MaeConfig,
    MaeWeights,
    MrmStore,
    lesion_free,
    train_mae,
)
from .synthdata import SynthConfig, generate_synthetic_dataset, load_dataset, split_slices, write_dataset

log = logging.getLogger("grcsf")

ENV_OUT = "GRCSF_OUT"
DEFAULT_MAE_STEPS = 1500


class UsageError(GrcsfError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class PathsConfig:
    root: str = "grcsf_out"
    data_dir: str = "data"
    mae_checkpoint: str = "checkpoints/mae.ckpt"
    mrm_dir: str = "mrm"
    model_checkpoint: str = "checkpoints/model.ckpt"
    output_dir: str = "outputs"


@dataclass
class MaeSection(MaeConfig):
    steps: int = DEFAULT_MAE_STEPS

    def mae_config(self) -> MaeConfig:
        return MaeConfig(**{f.name: getattr(self, f.name) for f in fields(MaeConfig)})


@dataclass
class MrmConfig:
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    k: int = DEFAULT_ITERATIONS
    metric: str = "absdiff"
    seed: int = 0

    def validate(self) -> None:
        if len(self.ratios) not in (1, 2) or not all(0 < r < 1 for r in self.ratios):
            raise ConfigurationError(f"mrm.ratios must hold one or two fractions in (0, 1), got {self.ratios}")
        if self.k < 1:
            raise ConfigurationError("mrm.k must be at least 1")
        if self.metric not in DIFF_METRICS:
            raise ConfigurationError(f"mrm.metric must be one of {DIFF_METRICS}")


@dataclass
class EvalConfig:
    split: str = "test"
    threshold: float | None = None
    predictions_dir: str | None = None
    voxel_volume: float = 1.0
    hu_threshold: float = HU_CALCIUM_THRESHOLD
    overlay_count: int = 3


SECTIONS = {
    "paths": PathsConfig,
    "synthdata": SynthConfig,
    "mae": MaeSection,
    "mrm": MrmConfig,
    "model": ModelConfig,
    "training": TrainConfig,
    "evaluation": EvalConfig,
    "ablation": AblationPlan,
}


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(_coerce(v, default[0] if default else None) for v in value)
    return value


def _build_section(cls, data: dict, name: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    defaults = cls()
    kwargs = {k: _coerce(v, getattr(defaults, k)) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"section {name!r}: {exc}") from exc


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    synthdata: SynthConfig = field(default_factory=SynthConfig)
    mae: MaeSection = field(default_factory=MaeSection)
    mrm: MrmConfig = field(default_factory=MrmConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationPlan = field(default_factory=AblationPlan)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config sections {sorted(unknown)}; expected {sorted(SECTIONS)}")
        parts = {}
        for name, section in SECTIONS.items():
            body = data.get(name, {})
            if not isinstance(body, dict):
                raise ConfigurationError(f"section {name!r} must be an object")
            parts[name] = _build_section(section, body, name)
        return cls(**parts)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = section.to_dict() if isinstance(section, AblationPlan) else asdict(section)
        return json.loads(json.dumps(out))

    def with_override(self, assignment: str) -> "RunConfig":
        if "=" not in assignment:
            raise ConfigurationError(f"override {assignment!r} is not of the form section.key=value")
        path, raw = assignment.split("=", 1)
        if path.count(".") != 1:
            raise ConfigurationError(f"override path {path!r} must be section.key")
        section, key = path.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        data = self.to_dict()
        if section not in data:
            raise ConfigurationError(f"unknown config section {section!r}")
        if key not in data[section]:
            raise ConfigurationError(f"unknown key {key!r} in section {section!r}")
        data[section][key] = value
        return RunConfig.from_dict(data)

    def with_seed(self, seed: int) -> "RunConfig":
        data = self.to_dict()
        for body in data.values():
            if "seed" in body:
                body["seed"] = int(seed)
        return RunConfig.from_dict(data)

    def root(self) -> Path:
        return Path(self.paths.root)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.root() / p


def resolve_config(config_path: str | None, overrides: list[str], seed: int | None) -> RunConfig:
    data: dict[str, Any] = {}
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{config_path}: invalid JSON ({exc})") from exc
    cfg = RunConfig.from_dict(data)
    for item in overrides:
        cfg = cfg.with_override(item)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    env_root = os.environ.get(ENV_OUT)
    if env_root:
        cfg.paths.root = env_root
    cfg.paths.root = str(Path(cfg.paths.root).resolve())
    return cfg


def write_snapshot(cfg: RunConfig, directory: Path, command: str) -> Path:
    path = Path(directory) / f"{command}.config.json"
    io.write_json_atomic(path, cfg.to_dict())
    return path


# ---------------------------------------------------------------- helpers


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_splits(cfg: RunConfig) -> dict:
    manifest = _require_file(cfg.path("data_dir") / "manifest.json", "dataset manifest")
    return split_slices(load_dataset(manifest))


def _check_sizes(slices, size: int) -> None:
    for s in slices:
        if s.shape != (size, size):
            raise ValidationError(f"slice {s.key} is {s.shape[0]}x{s.shape[1]}; set model.input_size to match")


def _load_mrm(cfg: RunConfig, needed: bool):
    if not needed:
        return None
    return MrmStore.load(cfg.path("mrm_dir"))


def _predictions(cfg: RunConfig, slices, model=None, store=None) -> np.ndarray:
    pred_dir = cfg.evaluation.predictions_dir
    if pred_dir:
        base = Path(pred_dir)
        base = base if base.is_absolute() else cfg.root() / base
        masks = []
        for s in slices:
            raw = io.load_png16(_require_file(base / f"{s.key}_pred.png", "prediction mask"))
            if raw.shape != s.shape:
                raise ValidationError(f"prediction for {s.key} is {raw.shape}, expected {s.shape}")
            masks.append((raw > io.PNG_LEVELS / 2).astype(np.uint8))
        return np.stack(masks)
    return predict_mask(model, slices, store, cfg.evaluation.threshold)


def _model_for_eval(cfg: RunConfig):
    if cfg.evaluation.predictions_dir:
        return None, None
    model = load_model(_require_file(cfg.path("model_checkpoint"), "model checkpoint"))
    return model, _load_mrm(cfg, bool(model.rcus))


def _mae_training_slices(train_slices):
    clean = lesion_free(train_slices)
    if not clean:
        log.warning("no lesion-free training slices; training the MAE on all training slices")
        return list(train_slices)
    return clean


def _eval_split(cfg: RunConfig, splits: dict):
    name = cfg.evaluation.split
    if name not in splits or not splits[name]:
        raise ValidationError(f"dataset has no slices in split {name!r}")
    return splits[name]


# ---------------------------------------------------------------- commands


def cmd_synth_data(cfg: RunConfig, args) -> Path:
    train_s, val_s, test_s = generate_synthetic_dataset(cfg.synthdata)
    out = cfg.path("data_dir")
    write_dataset(out, {"train": train_s, "val": val_s, "test": test_s})
    write_snapshot(cfg, out, "synth-data")
    print(f"wrote {len(train_s) + len(val_s) + len(test_s)} slices to {out}")
    return out


def cmd_train_mae(cfg: RunConfig, args) -> Path:
    splits = _load_splits(cfg)
    mae_cfg = cfg.mae.mae_config()
    ckpt = cfg.path("mae_checkpoint")
    weights = train_mae(_mae_training_slices(splits["train"]), mae_cfg, cfg.mae.steps,
                        loss_log=ckpt.with_suffix(".loss.json"))
    weights.save(ckpt)
    write_snapshot(cfg, ckpt.parent, "train-mae")
    if weights.loss_history:
        print(f"mae loss {weights.loss_history[0]:.5f} -> {weights.loss_history[-1]:.5f}")
    print(f"wrote {ckpt}")
    return ckpt


def cmd_gen_mrm(cfg: RunConfig, args) -> Path:
    cfg.mrm.validate()
    slices = [s for part in _load_splits(cfg).values() for s in part]
    weights = MaeWeights.load(_require_file(cfg.path("mae_checkpoint"), "MAE checkpoint"))
    store = MrmStore.build(slices, weights, cfg.mrm.ratios, cfg.mrm.k, cfg.mrm.metric, cfg.mrm.seed, args.workers)
    out = cfg.path("mrm_dir")
    store.save(out, {s.key: s.split for s in slices})
    write_snapshot(cfg, out, "gen-mrm")
    print(f"wrote residual maps for {len(store)} slices to {out}")
    return out


def cmd_train(cfg: RunConfig, args) -> Path:
    cfg.model.validate()
    splits = _load_splits(cfg)
    _check_sizes(splits["train"] + splits["val"], cfg.model.input_size)
    store = _load_mrm(cfg, cfg.model.enable_rcu)
    ckpt = cfg.path("model_checkpoint")
    history = ckpt.with_suffix(".history.jsonl")
    result = train(build_model(cfg.model), splits["train"], splits["val"], store, cfg.training, history_path=history)
    save_model(ckpt, result.model, {"best_epoch": result.best_epoch})
    write_snapshot(cfg, ckpt.parent, "train")
    print(f"best epoch {result.best_epoch}; wrote {ckpt}")
    return ckpt


def cmd_eval(cfg: RunConfig, args) -> Path:
    slices = _eval_split(cfg, _load_splits(cfg))
    model, store = _model_for_eval(cfg)
    if model is not None:
        _check_sizes(slices, model.config.input_size)
    pred = _predictions(cfg, slices, model, store)
    report = compute_metrics(pred, np.stack([s.mask for s in slices]), [s.patient_id for s in slices])
    out = cfg.path("output_dir") / "eval"
    io.write_json_atomic(out / "metrics.json", {"split": cfg.evaluation.split, **report.to_dict()})
    io.write_text_atomic(out / "metrics.csv", report.to_csv())
    for s, p in zip(slices, pred):
        io.save_png16(out / "pred" / f"{s.key}_pred.png", p.astype(np.float64))
    write_snapshot(cfg, out, "eval")
    print(json.dumps(report.summary(), sort_keys=True))
    return out


def cmd_eval_calcium(cfg: RunConfig, args) -> Path:
    slices = _eval_split(cfg, _load_splits(cfg))
    missing = [s.key for s in slices if s.hu is None]
    if missing:
        raise ValidationError(f"slices without HU data: {missing[:5]}")
    model, store = _model_for_eval(cfg)
    pred = _predictions(cfg, slices, model, store)
    per_patient = {}
    for pid in sorted({s.patient_id for s in slices}):
        idx = sorted((i for i, s in enumerate(slices) if s.patient_id == pid), key=lambda i: slices[i].slice_index)
        hu = np.stack([slices[i].hu for i in idx])
        thr = cfg.evaluation.hu_threshold
        pred_labels = calcium_postprocess(pred[idx], hu, thr)
        gt_labels = calcium_postprocess(np.stack([slices[i].mask for i in idx]), hu, thr)
        per_patient[pid] = calcium_score_eval(pred_labels, gt_labels, cfg.evaluation.voxel_volume).to_dict()
    keys = ("f1_vol", "sens_vol", "ppv_vol", "sens_lesion", "ppv_lesion")
    summary = {k: float(np.mean([r[k] for r in per_patient.values()])) for k in keys}
    out = cfg.path("output_dir") / "eval-calcium"
    io.write_json_atomic(out / "calcium.json", {"summary": summary, "per_patient": per_patient})
    write_snapshot(cfg, out, "eval-calcium")
    print(json.dumps(summary, sort_keys=True))
    return out


def _matching_store(cfg: RunConfig, slices) -> dict:
    """Reuse residual maps from ``gen-mrm`` when their settings match the configured ones."""
    index = cfg.path("mrm_dir") / "mrm_index.json"
    if not index.is_file():
        return {}
    store = MrmStore.load(cfg.path("mrm_dir"))
    setting = MrmSetting(cfg.mrm.k, tuple(cfg.mrm.ratios), cfg.mrm.metric)
    for s in slices:
        if s.key not in store:
            return {}
        pair = store[s.key]
        if (pair.iterations, tuple(pair.ratios), pair.diff_metric) != (setting.k, setting.ratios, setting.metric):
            return {}
    return {setting: store}


def cmd_ablate(cfg: RunConfig, args) -> Path:
    cfg.ablation.validate()
    splits = _load_splits(cfg)
    slices = splits["train"] + splits["val"] + splits["test"]
    _check_sizes(slices, cfg.model.input_size)
    run_dir = run_directory(cfg.path("output_dir") / "ablation", cfg.ablation)
    ckpt = cfg.path("mae_checkpoint")
    if ckpt.is_file():
        weights = MaeWeights.load(ckpt)
    else:
        weights = train_mae(_mae_training_slices(splits["train"]), cfg.mae.mae_config(), cfg.mae.steps)
        weights.save(run_dir / "mae.ckpt")
    stores = _matching_store(cfg, slices)
    results = run_ablation(cfg.ablation, (splits["train"], splits["val"], splits["test"]), weights, cfg.model,
                           cfg.training, stores, cfg.mrm.seed, args.workers, run_dir)
    emit_plots(results, run_dir / "figures")
    write_snapshot(cfg, run_dir, "ablate")
    for row in results.table():
        print(f"{row['label']:<28} dice {row['dice_mean']:.4f} +- {row['dice_std']:.4f}  iou {row['iou_mean']:.4f}")
    print(f"wrote {run_dir}")
    return run_dir


def _latest_run(cfg: RunConfig) -> Path:
    base = cfg.path("output_dir") / "ablation"
    runs = sorted(p for p in base.glob("*") if (p / "results.json").is_file()) if base.is_dir() else []
    if not runs:
        raise FileNotFoundError(f"no ablation results under {base}")
    return runs[-1]


def cmd_plot(cfg: RunConfig, args) -> Path:
    run_dir = Path(args.results) if args.results else _latest_run(cfg)
    results = AblationResults.load(run_dir)
    run_dir = run_dir if run_dir.is_dir() else run_dir.parent
    overlays = []
    if cfg.evaluation.overlay_count > 0 and cfg.path("model_checkpoint").is_file():
        splits = _load_splits(cfg)
        chosen = [s for s in splits["test"] if s.mask.any()][: cfg.evaluation.overlay_count]
        if chosen:
            model = load_model(cfg.path("model_checkpoint"))
            store = _load_mrm(cfg, bool(model.rcus) or (cfg.path("mrm_dir") / "mrm_index.json").is_file())
            pred = predict_mask(model, chosen, store, cfg.evaluation.threshold)
            overlays = [(s, p, store[s.key] if store is not None else None) for s, p in zip(chosen, pred)]
    out = run_dir / "figures"
    paths = emit_plots(results, out, overlays)
    write_snapshot(cfg, out, "plot")
    for p in paths:
        print(p)
    return out


COMMANDS = {
    "synth-data": (cmd_synth_data, "generate the synthetic phantom dataset"),
    "train-mae": (cmd_train_mae, "train the masked autoencoder on lesion-free training slices"),
    "gen-mrm": (cmd_gen_mrm, "write two-ratio residual maps for every slice"),
    "train": (cmd_train, "train the segmentation model"),
    "eval": (cmd_eval, "score predictions per patient"),
    "eval-calcium": (cmd_eval_calcium, "calcium component and volume scores on HU slices"),
    "ablate": (cmd_ablate, "run the ablation plan and emit result tables and figures"),
    "plot": (cmd_plot, "draw figures for an ablation run"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grcsf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (JSON-parsed when possible)")
        p.add_argument("--seed", type=int, help="override every section seed")
        p.add_argument("--workers", type=int, default=1, help="cap on concurrent slice-level work")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "plot":
            p.add_argument("--results", help="ablation run directory or results.json (default: latest run)")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        cfg = resolve_config(args.config, args.overrides, args.seed)
        COMMANDS[args.command][0](cfg, args)
        return 0
    except (UsageError, ConfigurationError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
