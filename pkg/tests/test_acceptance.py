"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
Criteria 5-7 use the frozen operating point in configs/forgetting.yaml and
configs/sweep.yaml (seed 0, calibrated once; see the comments there).
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ewc_lab import checks
from ewc_lab.cli import main as cli_main
from ewc_lab.config import load_config
from ewc_lab.ewc import PenaltyLedger
from ewc_lab.model import accuracy, init_params
from ewc_lab.persistence import Checkpoint, from_bytes, from_json, to_bytes, to_json
from ewc_lab.tasks import build_stream
from ewc_lab.trainer import lambda_sweep, run_sequence, train_single

ROOT = Path(__file__).resolve().parents[1]
FORGETTING = ROOT / "configs" / "forgetting.yaml"
SWEEP = ROOT / "configs" / "sweep.yaml"

# frozen thresholds
FORGET_DROP = 0.20
RETAIN_MARGIN = 0.15
B_ONLY_GAP = 0.05
STRINGENT_GAP = 0.05
SLACK = 1e-6


@pytest.fixture
def verdict(record_property):
    """Record one PASS/FAIL line (echoed in the terminal summary) and assert."""
    def check(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {name}: {detail}"
        record_property("acceptance", line)
        print(line)
        assert ok, detail
    return check


@pytest.fixture(scope="module")
def forgetting_runs():
    cfg = load_config(FORGETTING)
    stream = build_stream(cfg.stream)
    t0 = time.perf_counter()
    runs = {s: run_sequence(stream, replace(cfg.train, strategy=s, lam=None if s == "finetune" else cfg.train.lam))
            for s in ("finetune", "ewc-diagonal", "stringent-l2")}
    b_only, _ = train_single(init_params(stream.architecture), stream.specs[1], PenaltyLedger(),
                             replace(cfg.train, strategy="finetune", lam=None),
                             np.random.default_rng(cfg.train.seed))
    runs["b_only"] = accuracy(b_only, stream.specs[1].test)
    runs["seconds"] = time.perf_counter() - t0
    return runs


def test_criterion_1_fisher_hessian_identity(verdict):
    r = checks.check_fisher_vs_hessian()
    d = r.details
    ok = d["rel_error"] < 0.10 and d["rel_error_fisher_closed_form"] < 0.05 \
        and d["rel_error_hessian_closed_form"] < 0.05 and r.seconds < 5
    verdict("1 fisher-hessian identity", ok,
            f"|F-H|/H={d['rel_error']:.4f} (<0.10), F(0)={d['bernoulli_fisher_at_0']:.4f} "
            f"H(0)={d['bernoulli_hessian_at_0']:.6f} vs 0.25 (<5%), {r.seconds:.2f}s (<5s)")


def test_criterion_2_laplace_exactness(verdict):
    r = checks.check_laplace_conjugate()
    d = r.details
    ok = d["kl"] < 1e-8 and abs(d["grid_mean"] - 1.6) < 1e-3 and abs(d["grid_var"] - 0.2) < 1e-3 \
        and r.seconds < 2
    verdict("2 laplace exactness", ok,
            f"KL={d['kl']:.2e} (<1e-8), mean={d['grid_mean']:.6f}, var={d['grid_var']:.6f} "
            f"(1.6, 0.2 within 1e-3), {r.seconds:.3f}s (<2s)")


def test_criterion_3_taylor_control(verdict):
    r = checks.check_taylor()
    d = r.details
    ok = 2.5 <= d["loglog_slope"] <= 3.5 and d["residual_at_mode"] == 0.0 and d["grad_norm"] < 1e-8
    verdict("3 taylor control", ok,
            f"slope={d['loglog_slope']:.3f} (in [2.5,3.5]), residual at mode={d['residual_at_mode']}, "
            f"|grad|={d['grad_norm']:.1e} (<1e-8)")


def test_criterion_4_penalty_correctness(verdict):
    r = checks.check_penalty_gradient()
    d = r.details
    cfg = load_config(FORGETTING)
    stream = build_stream(replace(cfg.stream, n_train=200, n_test=200))
    short = replace(cfg.train, epochs=3)
    ft = run_sequence(stream, replace(short, strategy="finetune", lam=None))
    zero = run_sequence(stream, replace(short, lam=0.0))
    numbers = lambda res: [(r.task_trained, r.epoch, r.accuracies, r.train_loss, r.penalty) for r in res.records]
    same = ft.params == zero.params and numbers(ft) == numbers(zero)
    ok = d["penalty_at_anchor"] == 0.0 and d["fd_rel_error"] < 1e-8 \
        and d["quadratic_scaling_error"] < 1e-10 and same
    verdict("4 penalty correctness", ok,
            f"penalty(anchor)={d['penalty_at_anchor']}, FD rel err={d['fd_rel_error']:.1e} (<1e-8), "
            f"scaling err={d['quadratic_scaling_error']:.1e} (<1e-10), lambda=0 bit-identical={same}")


def test_criterion_5_forgetting(forgetting_runs, verdict):
    ft, ewc = forgetting_runs["finetune"], forgetting_runs["ewc-diagonal"]
    a_after_a = [r for r in ft.records if r.task_trained == "A"][-1].accuracies["A"]
    ft_a, ewc_a = ft.final_accuracies()["A"], ewc.final_accuracies()["A"]
    ewc_b, b_only = ewc.final_accuracies()["B"], forgetting_runs["b_only"]
    secs = forgetting_runs["seconds"]
    ok = a_after_a - ft_a >= FORGET_DROP and ewc_a >= ft_a + RETAIN_MARGIN \
        and abs(ewc_b - b_only) <= B_ONLY_GAP and secs < 60
    verdict("5 forgetting demonstration", ok,
            f"finetune A {a_after_a:.3f}->{ft_a:.3f} (drop>={FORGET_DROP}), ewc A={ewc_a:.3f} "
            f"(>= finetune+{RETAIN_MARGIN}), ewc B={ewc_b:.3f} vs B-only {b_only:.3f} "
            f"(within {B_ONLY_GAP}), {secs:.1f}s (<60s)")


def test_criterion_6_stringent_regime(forgetting_runs, verdict):
    ewc_b = forgetting_runs["ewc-diagonal"].final_accuracies()["B"]
    st_b = forgetting_runs["stringent-l2"].final_accuracies()["B"]
    ok = ewc_b - st_b >= STRINGENT_GAP
    verdict("6 stringent regime", ok,
            f"stringent B={st_b:.3f} vs ewc B={ewc_b:.3f} (gap>={STRINGENT_GAP}) at matched lambda")


def test_criterion_7_lambda_sweep(verdict):
    cfg = load_config(SWEEP)
    assert list(cfg.sweep.lambdas) == [0, 1, 10, 100, 1000, 10000]
    t0 = time.perf_counter()
    pts = lambda_sweep(build_stream(cfg.stream), cfg.train, cfg.sweep.lambdas, cfg.sweep.workers)
    secs = time.perf_counter() - t0
    disp = [p.fisher_displacement for p in pts]
    loss = [p.final_train_loss for p in pts]
    ok = all(b <= a + SLACK for a, b in zip(disp, disp[1:])) \
        and all(b >= a - SLACK for a, b in zip(loss, loss[1:])) and secs < 300
    verdict("7 lambda sweep monotonicity", ok,
            f"displacement {[round(x, 4) for x in disp]} non-increasing, "
            f"B loss {[round(x, 4) for x in loss]} non-decreasing, {secs:.1f}s (<300s)")


def test_criterion_8_determinism(tmp_path, verdict):
    runs = [cli_main(["run", str(FORGETTING), "--out", str(tmp_path / k)]) for k in ("a", "b")]
    csv_same = runs == [0, 0] and \
        (tmp_path / "a/records.csv").read_bytes() == (tmp_path / "b/records.csv").read_bytes()

    cfg = load_config(FORGETTING)
    stream = build_stream(cfg.stream)
    straight = run_sequence(stream, cfg.train)
    ck = Checkpoint({"layer_sizes": list(stream.architecture.layer_sizes)}, straight.params,
                    straight.ledger, straight.rng_state, straight.tasks_done, {})
    bits = lambda c: [c.params.values.tobytes()] + \
        [a.theta_star.values.tobytes() + a.fisher.values.tobytes() for a in c.ledger]
    round_trip = all(bits(x) == bits(ck) and x == ck for x in (from_bytes(to_bytes(ck)), from_json(to_json(ck))))

    first = run_sequence(stream, cfg.train, stop_task=1)
    saved = from_bytes(to_bytes(Checkpoint({}, first.params, first.ledger, first.rng_state, 1, {})))
    second = run_sequence(stream, cfg.train, params=saved.params, ledger=saved.ledger,
                          rng_state=saved.rng_state, start_task=saved.tasks_done)
    resume = second.params == straight.params and first.records + second.records == straight.records
    verdict("8 determinism", csv_same and round_trip and resume,
            f"records.csv byte-identical={csv_same}, checkpoint round-trip bit-exact={round_trip}, "
            f"split-run resume equals straight={resume}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s"]))
