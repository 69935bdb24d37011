"""Default-scale end-to-end run: 200 synthetic households, default model, no pretraining.

    python3 scripts/e2e_synthetic.py [--seed 0] [--jobs 4] [--out runs/e2e]
"""
import argparse
import json
import time
from pathlib import Path

from transapp import workflow as wf
from transapp.data import synthesize
from transapp.model import save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--pretrain", action="store_true", help="run masked pretraining first")
    ap.add_argument("--out", type=Path, default=Path("runs/e2e"))
    args = ap.parse_args()

    cfg = wf.RunConfig(seed=args.seed, jobs=args.jobs)
    cfg = cfg.updated({"synthetic": {"seed": args.seed}})
    t0 = time.time()
    ds = synthesize(cfg.synthetic_config())
    out = wf.run_experiment(ds, cfg, use_pretraining=args.pretrain)
    model = out.pop("model")
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out / "finetuned.ckpt")
    out["total_seconds"] = time.time() - t0
    out = json.loads(json.dumps(out, default=float))
    wf.write_snapshot(cfg, args.out, "e2e_synthetic", {"result": out})
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
