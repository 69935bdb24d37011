"""Hyperparameter sweeps (window length, width, positional encoding, diagonal mask, time channels).

Each axis is run on its own synthetic dataset and written to <out>/<axis>.csv.

    python3 scripts/sweeps.py --axes w,diag_mask [--seeds 0,1,2] [--reduced]
"""
import argparse
from pathlib import Path

import pandas as pd

from transapp import workflow as wf
from transapp.data import synthesize

DEFAULT_VALUES = {
    "w": "256,512,1024,2048",
    "d_model": "32,64,96,128",
    "positional_encoding": "fixed_sinusoidal,learnable,none",
    "diag_mask": "true,false",
    "time_channels": "true,false",
    "pretrain_fraction": "0,0.25,0.5,1.0",
}
REDUCED = {
    "synthetic": {"n_households": 60, "length": 2048},
    "window": 256,
    "model": {"d_model": 32, "n_heads": 2, "n_layers": 1},
    "pretrain": {"epochs": 3, "lr": 1e-3},
    "finetune": {"lr": 1e-3, "max_epochs": 10},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--axes", default="diag_mask,time_channels")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--reduced", action="store_true", help="small data and model for a quick look")
    ap.add_argument("--out", type=Path, default=Path("runs/sweeps"))
    args = ap.parse_args()

    cfg = wf.RunConfig().updated(REDUCED) if args.reduced else wf.RunConfig()
    seeds = [int(s) for s in args.seeds.split(",")]
    ds = synthesize(cfg.synthetic_config())
    args.out.mkdir(parents=True, exist_ok=True)
    for axis in args.axes.split(","):
        values = DEFAULT_VALUES[axis].split(",")
        if args.reduced and axis == "w":
            values = ["64", "128", "256", "512"]
        rows = wf.run_sweep(ds, cfg, axis, values, seeds)
        summary = pd.DataFrame(wf.summarize_sweep(rows))
        summary.to_csv(args.out / f"{axis}.csv", index=False)
        print(summary.to_string(index=False), flush=True)


if __name__ == "__main__":
    main()
