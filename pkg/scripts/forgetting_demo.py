"""Finetune vs stringent L2 vs EWC on the calibrated two-task stream.

Writes one CSV per strategy (accuracy on every task after every epoch) and
prints the end-of-sequence table.

    python scripts/forgetting_demo.py [--config configs/forgetting.yaml] [--out out/demo]
"""

import argparse
from dataclasses import replace
from pathlib import Path

from ewc_lab.cli import write_records_csv
from ewc_lab.config import load_config
from ewc_lab.tasks import build_stream
from ewc_lab.trainer import run_sequence

ROOT = Path(__file__).resolve().parents[1]

parser = argparse.ArgumentParser()
parser.add_argument("--config", default=ROOT / "configs" / "forgetting.yaml")
parser.add_argument("--out", default="out/demo")
args = parser.parse_args()

cfg = load_config(args.config)
stream = build_stream(cfg.stream)
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

print(f"{'strategy':<14} {'lambda':>8} " + " ".join(f"{'acc_' + t:>7}" for t in stream.task_ids))
for strategy in ("finetune", "stringent-l2", "ewc-diagonal"):
    lam = None if strategy == "finetune" else cfg.train.lam
    res = run_sequence(stream, replace(cfg.train, strategy=strategy, lam=lam))
    write_records_csv(out / f"{strategy}.csv", res.records, stream.task_ids)
    final = res.final_accuracies()
    print(f"{strategy:<14} {res.records[-1].lam:>8g} " + " ".join(f"{final[t]:>7.3f}" for t in stream.task_ids))
print(f"per-epoch records in {out}/")
