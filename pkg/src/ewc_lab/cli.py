"""Command-line runner: experiments, sweeps, math validation, checkpoint inspection.

Exit codes: 0 success, 1 failed validation or unreadable checkpoint,
2 invalid configuration or usage, 3 training diverged.

records.csv columns, in order::

    strategy, lambda, task_trained, epoch, train_loss, penalty, acc_<task id>...

Floats are written with ``repr`` so the file round-trips exactly and two runs
of one config are byte-identical (no wall-clock column).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, checks
from .config import ConfigError, ExperimentConfig, load_config
from .model import Architecture
from .persistence import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .tasks import build_stream
from .trainer import DivergenceError, ExperimentRecord, lambda_sweep, run_sequence

log = logging.getLogger("ewc_lab")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

BASE_COLUMNS = ("strategy", "lambda", "task_trained", "epoch", "train_loss", "penalty")
SUMMARY_KEYS = ("strategy", "lambda", "task_ids", "final_accuracy", "max_accuracy", "forgetting",
                "average_accuracy", "n_records", "config_hash", "code_version")


def record_columns(task_ids) -> list[str]:
    return [*BASE_COLUMNS, *(f"acc_{t}" for t in task_ids)]


def record_row(r: ExperimentRecord, task_ids) -> list[str]:
    return [r.strategy, repr(float(r.lam)), r.task_trained, str(r.epoch), repr(float(r.train_loss)),
            repr(float(r.penalty)), *(repr(float(r.accuracies[t])) for t in task_ids)]


def write_records_csv(path, records, task_ids, append: bool = False) -> None:
    path = Path(path)
    fresh = not (append and path.exists())
    with path.open("w" if fresh else "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(record_columns(task_ids))
        for r in records:
            w.writerow(record_row(r, task_ids))


def read_records_csv(path) -> list[ExperimentRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            accs = {k[4:]: float(v) for k, v in row.items() if k.startswith("acc_")}
            out.append(ExperimentRecord(row["strategy"], float(row["lambda"]), row["task_trained"],
                                        int(row["epoch"]), accs, float(row["penalty"]),
                                        float(row["train_loss"])))
    return out


def record_dicts(records, task_ids) -> list[dict]:
    cols = record_columns(task_ids)
    return [dict(zip(cols, [r.strategy, r.lam, r.task_trained, r.epoch, r.train_loss, r.penalty,
                            *(r.accuracies[t] for t in task_ids)])) for r in records]


def summarize(records, task_ids, config: ExperimentConfig) -> dict:
    """Final, best and forgotten accuracy per task, over the whole record history."""
    final = dict(records[-1].accuracies) if records else {}
    best = {t: max(r.accuracies[t] for r in records) for t in task_ids} if records else {}
    out = {
        "strategy": config.train.strategy,
        "lambda": config.train.effective_lambda,
        "task_ids": list(task_ids),
        "final_accuracy": final,
        "max_accuracy": best,
        "forgetting": {t: best[t] - final[t] for t in final},
        "average_accuracy": sum(final.values()) / len(final) if final else None,
        "n_records": len(records),
        "config_hash": config.digest(),
        "code_version": __version__,
    }
    assert tuple(out) == SUMMARY_KEYS
    return out


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def _write_records(out: Path, records, task_ids, formats, append=False) -> None:
    if "csv" in formats:
        write_records_csv(out / "records.csv", records, task_ids, append)
    if "json" in formats:
        path = out / "records.json"
        rows = json.loads(path.read_text()) if append and path.exists() else []
        path.write_text(json.dumps(rows + record_dicts(records, task_ids), indent=1) + "\n")


def _validate(report_path: Path | None) -> bool:
    results = checks.run_all()
    rep = checks.report(results)
    for r in results:
        log.info("validate-math %-24s %s (%.2fs)", r.name, "PASS" if r.passed else "FAIL", r.seconds)
        if not r.passed:
            print(f"FAIL {r.name}: {json.dumps(r.details, default=float)}", file=sys.stderr)
    if report_path is not None:
        report_path.parent.mkdir(parents=True, exist_ok=True)
        _write_json(report_path, json.loads(json.dumps(rep, default=float)))
    return rep["passed"]


def cmd_run(cfg: ExperimentConfig, formats, stop_after: int | None = None, resume: str | None = None) -> int:
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    stream = build_stream(cfg.stream)
    ids = stream.task_ids
    kw = {}
    if resume:
        ckpt = load_checkpoint(resume)
        if ckpt.provenance.get("config_hash") != cfg.digest():
            print(f"error: checkpoint {resume} was written by a different configuration", file=sys.stderr)
            return EXIT_CONFIG
        kw = dict(params=ckpt.params, ledger=ckpt.ledger, rng_state=ckpt.rng_state,
                  start_task=ckpt.tasks_done)
        log.info("resuming after %d task(s) from %s", ckpt.tasks_done, resume)
    stop = None if stop_after is None else min(len(stream), kw.get("start_task", 0) + stop_after)
    try:
        res = run_sequence(stream, cfg.train, stop_task=stop, **kw)
    except DivergenceError as exc:
        _write_records(out, exc.partial_records, ids, formats, append=bool(resume))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_records(out, res.records, ids, formats, append=bool(resume))
    ckpt = Checkpoint({"layer_sizes": list(stream.architecture.layer_sizes),
                       "seed": stream.architecture.seed},
                      res.params, res.ledger, res.rng_state, res.tasks_done,
                      {"config_hash": cfg.digest(), "code_version": __version__,
                       "stream_fingerprint": stream.fingerprint()})
    save_checkpoint(out / f"checkpoint.{cfg.output.checkpoint_format}", ckpt, cfg.output.checkpoint_format)
    history = read_records_csv(out / "records.csv") if "csv" in formats else res.records
    summary = summarize(history, ids, cfg)
    _write_json(out / "summary.json", summary)
    log.info("final accuracy %s", summary["final_accuracy"])
    if cfg.output.validate_math and not _validate(out / "math_report.json"):
        return EXIT_FAILED
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, formats) -> int:
    if cfg.sweep is None or len(cfg.sweep.lambdas) < 2:
        print(f"error: {cfg.source}: sweep needs a [sweep] section with at least two lambdas",
              file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    stream = build_stream(cfg.stream)
    ids = stream.task_ids
    try:
        points = lambda_sweep(stream, cfg.train, cfg.sweep.lambdas, cfg.sweep.workers)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_records(out, [r for p in points for r in p.records], ids, formats)
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "fisher_displacement", "final_train_loss", *(f"acc_{t}" for t in ids)])
        for p in points:
            w.writerow([repr(p.lam), repr(float(p.fisher_displacement)), repr(float(p.final_train_loss)),
                        *(repr(float(p.final_accuracies[t])) for t in ids)])
    disp = [p.fisher_displacement for p in points]
    loss = [p.final_train_loss for p in points]
    _write_json(out / "summary.json", {
        "strategy": cfg.train.strategy,
        "lambdas": [p.lam for p in points],
        "task_ids": ids,
        "final_accuracy": [p.final_accuracies for p in points],
        "fisher_displacement": disp,
        "final_train_loss": loss,
        "config_hash": cfg.digest(),
        "code_version": __version__,
    })
    return EXIT_OK


def cmd_inspect(path: str) -> int:
    ckpt = load_checkpoint(path)
    arch = Architecture(tuple(ckpt.architecture["layer_sizes"]), ckpt.architecture.get("seed", 0))
    desc = {
        "format_version": ckpt.format_version,
        "architecture": ckpt.architecture,
        "n_params": arch.n_params,
        "layout": [[e.name, list(e.shape)] for e in ckpt.params.layout],
        "tasks_done": ckpt.tasks_done,
        "anchors": [{"task_id": a.task_id, "lambda": a.lam, "fisher_kind": a.fisher.kind,
                     "fisher_source": a.fisher.source, "fisher_trace": float(a.fisher.diag.sum())}
                    for a in ckpt.ledger],
        "provenance": ckpt.provenance,
    }
    print(json.dumps(desc, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ewc-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("config")
        sp.add_argument("--seed", type=int, help="override stream and train seeds")
        sp.add_argument("--out", help="override output directory")
        sp.add_argument("--workers", type=int, help="sweep worker processes")
        sp.add_argument("--format", choices=("csv", "json"), help="records format")

    run = sub.add_parser("run", help="train one configured sequence")
    common(run)
    run.add_argument("--stop-after", type=int, metavar="K", help="stop after K more tasks")
    run.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint, appending records")
    common(sub.add_parser("sweep", help="repeat a run across the configured lambdas"))
    vm = sub.add_parser("validate-math", help="run the numerical oracle suites")
    vm.add_argument("--report", default="math_report.json", metavar="PATH")
    ic = sub.add_parser("inspect-checkpoint", help="describe a checkpoint file")
    ic.add_argument("path")
    return p


def main(argv=None) -> int:
    level = os.environ.get("EWC_LAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "validate-math":
            return EXIT_OK if _validate(Path(args.report)) else EXIT_FAILED
        if args.verb == "inspect-checkpoint":
            return cmd_inspect(args.path)
        cfg = load_config(args.config).with_overrides(args.seed, args.out, args.workers)
        formats = (args.format,) if args.format else cfg.output.formats
        if args.verb == "run":
            if args.stop_after is not None and args.stop_after < 1:
                raise ConfigError("--stop-after must be at least 1")
            return cmd_run(cfg, formats, args.stop_after, args.resume)
        return cmd_sweep(cfg, formats)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
