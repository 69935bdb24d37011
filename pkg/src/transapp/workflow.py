"""Run configuration and the pipeline steps shared by the CLI and the scripts."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .adf import (ALPHA_GRID, AlphaParameter, DetectionResult, WindowSpec, finish, predict_many, slice_series,
                  tune_alpha, usable_series)
from .data import ConsumptionSeries, LabeledDataset, SplitSpec, SyntheticConfig, split, undersample
from .errors import ConfigError
from .finetune import FinetuneConfig, FinetuneResult, build_windows, finetune
from .metrics import report_row
from .model import TransAppConfig, TransAppModel
from .pretrain import MaskSpec, PretrainConfig, UnlabeledWindows, pretrain

log = logging.getLogger(__name__)

SWEEP_AXES = ("w", "d_model", "positional_encoding", "diag_mask", "time_channels", "pretrain_fraction")


@dataclass
class RunConfig:
    appliance: str = "appliance"
    window: int = 1024
    seed: int = 0
    time_channels: bool = True
    model: dict = field(default_factory=dict)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    alpha_grid: tuple[float, ...] = ALPHA_GRID
    alpha: float | None = None
    pretrain_include_test: bool = False
    pretrain_fraction: float = 1.0
    eval_split: str = "test"
    jobs: int = 1
    seeds: tuple[int, ...] = (0, 1, 2)
    synthetic: dict = field(default_factory=dict)

    _nested = {"pretrain": PretrainConfig, "finetune": FinetuneConfig, "mask": MaskSpec}

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("split", "alpha_grid", "seeds"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls().updated(d)

    def updated(self, overrides: dict) -> "RunConfig":
        """Copy with (nested) keys replaced; unknown keys are rejected."""
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        new = copy.deepcopy(self)
        for key, value in overrides.items():
            if key in self._nested:
                sub = getattr(new, key)
                sub_known = {f.name for f in fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown {key} config keys: {sorted(bad)}")
                value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
                setattr(new, key, replace(sub, **value))
            elif key in ("model", "synthetic"):
                setattr(new, key, {**getattr(new, key), **value})
            elif key in ("split", "alpha_grid", "seeds"):
                setattr(new, key, tuple(value))
            else:
                setattr(new, key, value)
        new.validate()
        return new

    def validate(self) -> None:
        if self.window < 2:
            raise ConfigError(f"window must be >= 2, got {self.window}")
        if not 0.0 <= self.pretrain_fraction <= 1.0:
            raise ConfigError("pretrain_fraction must lie in [0, 1]")
        if self.eval_split not in ("train", "val", "test", "all"):
            raise ConfigError(f"eval_split must be train, val, test or all; got {self.eval_split}")
        SplitSpec(*self.split)
        self.model_config()

    def model_config(self) -> TransAppConfig:
        overrides = dict(self.model)
        overrides.setdefault("in_channels", 5 if self.time_channels else 1)
        return TransAppConfig.from_dict(overrides)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(*self.split, seed=self.seed)

    def synthetic_config(self) -> SyntheticConfig:
        d = {"appliance": self.appliance, "seed": self.seed, **self.synthetic}
        for key in ("base_level", "hour_band"):
            if key in d:
                d[key] = tuple(d[key])
        return SyntheticConfig(**d)


def load_run_config(source: str | None = None, **overrides) -> RunConfig:
    """Build a RunConfig from a JSON file path or inline JSON string, then explicit overrides."""
    cfg = RunConfig()
    if source:
        if source.lstrip().startswith("{"):
            text = source
        elif Path(source).is_file():
            text = Path(source).read_text()
        else:
            raise ConfigError(f"--config is neither inline JSON nor an existing file: {source}")
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config is neither a JSON file nor JSON text: {exc}") from None
        cfg = cfg.updated(data)
    clean = {k: v for k, v in overrides.items() if v is not None}
    return cfg.updated(clean) if clean else cfg


def write_snapshot(cfg: RunConfig, out_dir, command: str, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps({"command": command, **(extra or {}), "config": cfg.to_dict()}, indent=2))
    return path


# -- pipeline steps ----------------------------------------------------------

def make_model(cfg: RunConfig) -> TransAppModel:
    return TransAppModel(cfg.model_config(), seed=cfg.seed)


def splits(ds: LabeledDataset, cfg: RunConfig):
    return split(ds, cfg.split_spec())


def pretrain_pool(ds: LabeledDataset, cfg: RunConfig, test: LabeledDataset | None = None) -> list[ConsumptionSeries]:
    """Series available for pretraining: everything, minus the test split unless allowed."""
    pool = ds.all_series()
    if test is not None and not cfg.pretrain_include_test:
        held_out = {s.series_id for s in test.series}
        pool = [s for s in pool if s.series_id not in held_out]
    if cfg.pretrain_fraction < 1.0:
        rng = np.random.default_rng([cfg.seed, 7])
        keep = int(round(cfg.pretrain_fraction * len(pool)))
        pool = [pool[i] for i in sorted(rng.choice(len(pool), size=keep, replace=False))]
    return pool


def unlabeled_windows(series: list[ConsumptionSeries], spec: WindowSpec) -> UnlabeledWindows:
    series = usable_series(series, spec.window)
    if not series:
        return UnlabeledWindows(np.zeros((0, spec.window, spec.channels), np.float32))
    return UnlabeledWindows(np.concatenate([slice_series(s, spec.window, spec).data for s in series]))


def run_pretrain(model: TransAppModel, pool: list[ConsumptionSeries], cfg: RunConfig,
                 spec: WindowSpec | None = None):
    """Fit input scaling on the pool (unless given) and pretrain. Returns (spec, trace)."""
    usable = usable_series(pool, cfg.window)
    if not usable:
        raise ConfigError("no series long enough to pretrain on")
    spec = spec or WindowSpec(cfg.window, cfg.time_channels).fitted(usable)
    windows = unlabeled_windows(usable, spec)
    _, trace = pretrain(model, windows, cfg.mask, replace(cfg.pretrain, seed=cfg.seed))
    model.meta["window_spec"] = spec.to_dict()
    return spec, trace


def run_finetune(model: TransAppModel, train: LabeledDataset, val: LabeledDataset, cfg: RunConfig,
                 spec: WindowSpec | None = None) -> tuple[WindowSpec, FinetuneResult, AlphaParameter]:
    """Undersample, train with early stopping, then tune alpha on validation."""
    balanced = undersample(train, np.random.default_rng([cfg.seed, 11]))
    spec = spec or WindowSpec(cfg.window, cfg.time_channels).fitted(usable_series(balanced.series, cfg.window))
    windows = build_windows(balanced.series, spec, model.dtype)
    result = finetune(model, windows, val.series, spec, replace(cfg.finetune, seed=cfg.seed),
                      cfg.alpha_grid, cfg.jobs)
    alpha = tune_alpha(model, val.series, spec, cfg.alpha_grid, cfg.appliance, cfg.jobs)
    model.meta.update({"window_spec": spec.to_dict(), "appliance": cfg.appliance,
                       "alpha": alpha.alpha_star, "alpha_param": alpha.to_dict()})
    return spec, result, alpha


def spec_from_model(model: TransAppModel, cfg: RunConfig) -> WindowSpec | None:
    stored = model.meta.get("window_spec")
    if stored is None:
        return None
    spec = WindowSpec(**stored)
    if spec.window != cfg.window or spec.time_channels != cfg.time_channels:
        log.warning("stored window spec %s differs from run config; refitting input scaling", stored)
        return None
    return spec


def detect_all(model: TransAppModel, series: list[ConsumptionSeries], spec: WindowSpec, alpha: float,
               jobs: int = 1) -> list[DetectionResult]:
    series = usable_series(series, spec.window)
    return [finish(r, alpha) for r in predict_many(model, series, spec, jobs)]


def evaluate(model: TransAppModel, series: list[ConsumptionSeries], spec: WindowSpec, alpha: float,
             appliance: str, split_name: str, jobs: int = 1):
    results = detect_all(model, series, spec, alpha, jobs)
    labels = {s.series_id: s.label for s in series}
    y_true = [labels[r.series_id] for r in results]
    return results, report_row(y_true, [r.label for r in results], appliance, split_name, alpha)


def run_experiment(ds: LabeledDataset, cfg: RunConfig, use_pretraining: bool = False) -> dict:
    """Split, (optionally) pretrain, finetune, tune alpha and score the evaluation split."""
    t0 = time.time()
    train, val, test = splits(ds, cfg)
    model = make_model(cfg)
    spec = None
    trace: list[float] = []
    if use_pretraining and cfg.pretrain_fraction > 0:
        pool = pretrain_pool(ds, cfg, test)
        if pool:
            spec, trace = run_pretrain(model, pool, cfg)
    spec, result, alpha = run_finetune(model, train, val, cfg, spec)
    target = {"train": train, "val": val, "test": test}.get(cfg.eval_split)
    series = target.series if target is not None else ds.series
    _, row = evaluate(model, series, spec, alpha.alpha_star, cfg.appliance, cfg.eval_split, cfg.jobs)
    return {
        **row,
        "alpha": alpha.alpha_star,
        "epochs": len(result.history),
        "best_epoch": result.best_epoch,
        "val_macro_f1": result.best_score,
        "pretrain_epochs": len(trace),
        "seconds": time.time() - t0,
        "model": model,
    }


def sweep_config(cfg: RunConfig, axis: str, value) -> tuple[RunConfig, bool]:
    """Config for one sweep point, and whether that point pretrains."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if axis == "w":
        return cfg.updated({"window": int(value)}), False
    if axis == "d_model":
        return cfg.updated({"model": {"d_model": int(value)}}), False
    if axis == "positional_encoding":
        return cfg.updated({"model": {"positional_encoding": str(value)}}), False
    if axis == "diag_mask":
        return cfg.updated({"model": {"diag_mask": _as_bool(value)}}), False
    if axis == "time_channels":
        flag = _as_bool(value)
        model = {**cfg.model, "in_channels": 5 if flag else 1}
        return cfg.updated({"time_channels": flag, "model": model}), False
    frac = float(value)
    return cfg.updated({"pretrain_fraction": frac}), frac > 0


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def run_sweep(ds: LabeledDataset, cfg: RunConfig, axis: str, values, seeds=None) -> list[dict]:
    rows = []
    for value in values:
        for seed in seeds if seeds is not None else cfg.seeds:
            point, use_pt = sweep_config(cfg.updated({"seed": int(seed)}), axis, value)
            out = run_experiment(ds, point, use_pretraining=use_pt)
            rows.append({"axis": axis, "value": value, "seed": seed, "macro_f1": out["macro_f1"],
                         "alpha": out["alpha"], "epochs": out["epochs"], "seconds": round(out["seconds"], 2)})
            log.info("sweep %s=%s seed=%s: macro F1 %.4f", axis, value, seed, out["macro_f1"])
    return rows


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Mean and spread of the score per sweep value, in first-seen order."""
    order, by_value = [], {}
    for r in rows:
        key = str(r["value"])
        if key not in by_value:
            order.append(key)
            by_value[key] = []
        by_value[key].append(r["macro_f1"])
    return [{"axis": rows[0]["axis"], "value": k, "runs": len(by_value[k]),
             "mean_macro_f1": float(np.mean(by_value[k])), "std_macro_f1": float(np.std(by_value[k]))}
            for k in order]
