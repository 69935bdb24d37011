"""``adf`` command line: synth, pretrain, finetune, tune-alpha, detect, evaluate, sweep.

Exit codes: 0 success, 2 usage or data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .adf import WindowSpec, tune_alpha, write_results
from .data import LabeledDataset, load_csv, synthesize, write_csv
from .errors import ConfigError, DivergenceError, TransAppError
from .finetune import write_history
from .metrics import write_report
from .model import load_checkpoint, save_checkpoint
from .pretrain import write_trace
from . import workflow as wf

log = logging.getLogger("transapp")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, data_required: bool = True) -> None:
    p.add_argument("--data", required=data_required, help="series CSV (series_id,timestamp,value)")
    p.add_argument("--labels", help="labels CSV (series_id,appliance,label)")
    p.add_argument("--appliance", help="appliance name to detect")
    p.add_argument("--window", type=int, help="window length w")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, help="worker threads for detection")
    p.add_argument("--config", help="JSON file or inline JSON with run config overrides")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adf", description="Appliance detection with a pretrained transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--appliance")
    p.add_argument("--config")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining on all non-test series")
    _common(p)

    p = sub.add_parser("finetune", help="supervised training with early stopping, then alpha tuning")
    _common(p)
    p.add_argument("--pretrained", help="pretrained checkpoint to start from")

    for name, text in (("tune-alpha", "tune the merge quantile on the validation split"),
                       ("evaluate", "tune alpha on validation, then score the evaluation split"),
                       ("detect", "label every series with the checkpoint's alpha")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="rerun the pipeline over the values of one axis")
    _common(p, data_required=False)
    p.add_argument("--axis", required=True, help=f"one of {', '.join(wf.SWEEP_AXES)}")
    p.add_argument("--values", required=True, help="comma separated values")
    p.add_argument("--pretrained", help=argparse.SUPPRESS)
    return parser


def _run_config(args) -> wf.RunConfig:
    return wf.load_run_config(args.config, appliance=getattr(args, "appliance", None),
                              window=getattr(args, "window", None), seed=getattr(args, "seed", None),
                              jobs=getattr(args, "jobs", None))


def _load(args, cfg: wf.RunConfig) -> LabeledDataset:
    if not Path(args.data).is_file():
        raise UsageError(f"data file not found: {args.data}")
    if args.labels and not Path(args.labels).is_file():
        raise UsageError(f"labels file not found: {args.labels}")
    return load_csv(args.data, args.labels, cfg.appliance)


def _need_labels(args) -> None:
    if not args.labels:
        raise UsageError(f"{args.command} needs --labels")


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2))


def cmd_synth(args, cfg: wf.RunConfig, out: Path) -> None:
    ds = synthesize(cfg.synthetic_config())
    write_csv(ds, out / "series.csv", out / "labels.csv")
    print(f"wrote {len(ds)} series ({ds.counts[1]} positive) to {out}")


def cmd_pretrain(args, cfg: wf.RunConfig, out: Path) -> None:
    ds = _load(args, cfg)
    test = wf.splits(ds, cfg)[2] if len(ds) >= 10 else None
    pool = wf.pretrain_pool(ds, cfg, test)
    pool = [s for s in pool if len(s) >= cfg.window]
    if not pool:
        raise UsageError(f"no series of length >= {cfg.window} available for pretraining")
    model = wf.make_model(cfg)
    _, trace = wf.run_pretrain(model, pool, cfg)
    model.meta.update({"stage": "pretrained", "seed": cfg.seed, "pool_size": len(pool)})
    save_checkpoint(model, out / "pretrained.ckpt")
    write_trace(trace, out / "pretrain_trace.csv")
    print(f"pretrained on {len(pool)} series; final masked MAE {trace[-1]:.6g}")


def cmd_finetune(args, cfg: wf.RunConfig, out: Path) -> None:
    _need_labels(args)
    ds = _load(args, cfg)
    train, val, _ = wf.splits(ds, cfg)
    spec = None
    if args.pretrained:
        model = load_checkpoint(args.pretrained, expected_config=cfg.model_config())
        spec = wf.spec_from_model(model, cfg)
    else:
        model = wf.make_model(cfg)
    spec, result, alpha = wf.run_finetune(model, train, val, cfg, spec)
    _, row = wf.evaluate(model, val.series, spec, alpha.alpha_star, cfg.appliance, "val", cfg.jobs)
    model.meta.update({"stage": "finetuned", "seed": cfg.seed, "pretrained": bool(args.pretrained),
                       "best_epoch": result.best_epoch})
    save_checkpoint(model, out / "finetuned.ckpt")
    write_history(result.history, out / "val_history.csv")
    _write_json(alpha.to_dict(), out / "alpha.json")
    write_report([row], out / "metrics.csv")
    print(f"best epoch {result.best_epoch} of {len(result.history)}; val macro F1 {row['macro_f1']:.4f} "
          f"at alpha {alpha.alpha_star}")


def _checkpoint(args, cfg: wf.RunConfig):
    model = load_checkpoint(args.checkpoint)
    stored = model.meta.get("window_spec")
    if stored is None:
        raise UsageError(f"{args.checkpoint} has no input scaling; finetune it first")
    spec = WindowSpec(**stored)
    if args.window is not None and args.window != spec.window:
        raise UsageError(f"--window {args.window} differs from the checkpoint's window {spec.window}")
    return model, spec


def cmd_tune_alpha(args, cfg: wf.RunConfig, out: Path) -> None:
    _need_labels(args)
    model, spec = _checkpoint(args, cfg)
    _, val, _ = wf.splits(_load(args, cfg), cfg)
    alpha = tune_alpha(model, val.series, spec, cfg.alpha_grid, cfg.appliance, cfg.jobs)
    _write_json(alpha.to_dict(), out / "alpha.json")
    print(f"alpha* = {alpha.alpha_star} (val macro F1 {alpha.tuning_score:.4f})")


def cmd_evaluate(args, cfg: wf.RunConfig, out: Path) -> None:
    _need_labels(args)
    model, spec = _checkpoint(args, cfg)
    ds = _load(args, cfg)
    train, val, test = wf.splits(ds, cfg)
    alpha = tune_alpha(model, val.series, spec, cfg.alpha_grid, cfg.appliance, cfg.jobs)
    target = {"train": train, "val": val, "test": test}.get(cfg.eval_split)
    series = target.series if target is not None else ds.series
    results, row = wf.evaluate(model, series, spec, alpha.alpha_star, cfg.appliance, cfg.eval_split, cfg.jobs)
    write_results(results, out / "results.csv", cfg.appliance)
    write_report([row], out / "metrics.csv")
    _write_json(alpha.to_dict(), out / "alpha.json")
    print(f"{cfg.eval_split} macro F1 {row['macro_f1']:.4f} at alpha {alpha.alpha_star}")


def cmd_detect(args, cfg: wf.RunConfig, out: Path) -> None:
    model, spec = _checkpoint(args, cfg)
    alpha = cfg.alpha if cfg.alpha is not None else model.meta.get("alpha")
    if alpha is None:
        raise UsageError("no alpha: the checkpoint carries none and the config sets none")
    appliance = args.appliance or model.meta.get("appliance", cfg.appliance)
    ds = _load(args, cfg)
    results = wf.detect_all(model, ds.all_series(), spec, float(alpha), cfg.jobs)
    write_results(results, out / "results.csv", appliance)
    print(f"labeled {len(results)} series with alpha {alpha}")


def cmd_sweep(args, cfg: wf.RunConfig, out: Path) -> None:
    if args.axis not in wf.SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {args.axis!r}; choose from {', '.join(wf.SWEEP_AXES)}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    ds = _load(args, cfg) if args.data else synthesize(cfg.synthetic_config())
    seeds = cfg.seeds if args.seed is None else (args.seed,)
    rows = wf.run_sweep(ds, cfg, args.axis, values, seeds)
    summary = wf.summarize_sweep(rows)
    for name, table in (("sweep_runs.csv", rows), ("sweep.csv", summary)):
        with open(out / name, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(table[0]))
            writer.writeheader()
            writer.writerows(table)
    for r in summary:
        print(f"{r['axis']}={r['value']}: mean macro F1 {r['mean_macro_f1']:.4f} over {r['runs']} runs")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "tune-alpha": cmd_tune_alpha,
    "evaluate": cmd_evaluate,
    "detect": cmd_detect,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        out = Path(args.out)
        wf.write_snapshot(cfg, out, args.command, {"argv": list(sys.argv[1:] if argv is None else argv)})
        COMMANDS[args.command](args, cfg, out)
    except (DivergenceError, FloatingPointError) as exc:
        print(f"adf {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, TransAppError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"adf {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
