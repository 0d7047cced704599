"""Retention/plasticity trade-off over lambda (same seeds at every point).

    python scripts/lambda_sweep.py [--config configs/sweep.yaml] [--workers 3]
"""

import argparse
import csv
from pathlib import Path

from ewc_lab.config import load_config
from ewc_lab.tasks import build_stream
from ewc_lab.trainer import lambda_sweep

ROOT = Path(__file__).resolve().parents[1]

parser = argparse.ArgumentParser()
parser.add_argument("--config", default=ROOT / "configs" / "sweep.yaml")
parser.add_argument("--workers", type=int)
parser.add_argument("--out", default="out/sweep.csv")
args = parser.parse_args()

cfg = load_config(args.config)
stream = build_stream(cfg.stream)
points = lambda_sweep(stream, cfg.train, cfg.sweep.lambdas, args.workers or cfg.sweep.workers)

Path(args.out).parent.mkdir(parents=True, exist_ok=True)
with open(args.out, "w", newline="") as fh:
    w = csv.writer(fh)
    w.writerow(["lambda", "fisher_displacement", "final_train_loss", *(f"acc_{t}" for t in stream.task_ids)])
    for p in points:
        w.writerow([p.lam, p.fisher_displacement, p.final_train_loss,
                    *(p.final_accuracies[t] for t in stream.task_ids)])
        print(f"lambda={p.lam:<8g} displacement={p.fisher_displacement:.4f} "
              f"B loss={p.final_train_loss:.4f} " +
              " ".join(f"{t}={a:.3f}" for t, a in p.final_accuracies.items()))
print(f"wrote {args.out}")
