"""Sequential training under the three regimes: finetune, stringent L2, EWC."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalOverflowError, ParamVector
from .ewc import FisherConfig, PenaltyLedger, ProximalPenalty, TaskAnchor, penalty, total_loss
from .fisher import FisherEstimate, estimate_fisher
from .model import Batch, accuracy, init_params, nll_loss, nll_value
from .tasks import TaskSpec, TaskStream

log = logging.getLogger(__name__)

STRATEGIES = ("finetune", "stringent-l2", "ewc-diagonal", "ewc-full")
DEFAULT_LAMBDA = 100.0


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, lr: float, task_id: str = "", detail: str = ""):
        where = f" on task {task_id}" if task_id else ""
        super().__init__(f"training diverged{where} at epoch {epoch} with learning rate {lr}"
                         + (f": {detail}" if detail else ""))
        self.epoch, self.lr, self.task_id = epoch, lr, task_id


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "ewc-diagonal"
    learning_rate: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    lam: float | None = None
    fisher_samples: int = 1024
    fisher_source: str = "model-sampled"
    penalty_step: str = "implicit"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1 or self.fisher_samples < 1:
            raise ValueError("batch_size and fisher_samples must be positive")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.strategy == "finetune" and self.lam:
            raise ValueError("finetune takes no lambda (leave it unset or 0)")
        if self.penalty_step not in ("implicit", "explicit"):
            raise ValueError("penalty_step must be 'implicit' or 'explicit'")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    @property
    def effective_lambda(self) -> float:
        if self.strategy == "finetune":
            return 0.0
        return DEFAULT_LAMBDA if self.lam is None else float(self.lam)


@dataclass
class ExperimentRecord:
    strategy: str
    lam: float
    task_trained: str
    epoch: int
    accuracies: dict[str, float]
    penalty: float
    train_loss: float
    wall_time: float = field(default=0.0, compare=False)


def _step(params: ParamVector, batch: Batch, ledger: PenaltyLedger, config: TrainConfig,
          prox: ProximalPenalty) -> ParamVector:
    lr = config.learning_rate
    if config.penalty_step == "explicit":
        root = total_loss(ledger, params, batch)
        ad.forward(root)
        return params.with_values(params.values - lr * ad.backward(root).values)
    root = nll_loss(params, batch)
    ad.forward(root)
    return params.with_values(prox(params.values - lr * ad.backward(root).values))


def train_single(params: ParamVector, spec: TaskSpec, ledger: PenaltyLedger, config: TrainConfig,
                 rng: np.random.Generator | None = None,
                 evaluate_on: list[TaskSpec] | None = None) -> tuple[ParamVector, list[ExperimentRecord]]:
    """Minibatch SGD on one task, with the ledger's penalty in force.

    With ``penalty_step="implicit"`` each step is a gradient step on the NLL
    followed by the exact proximal map of the penalty; ``"explicit"``
    differentiates the summed objective directly.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    evaluate_on = [spec] if evaluate_on is None else evaluate_on
    lam = config.effective_lambda
    train = spec.train
    n = len(train)
    prox = ProximalPenalty(ledger, config.learning_rate)
    start = nll_value(params, train) + penalty(ledger, params)
    records = []
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        try:
            for lo in range(0, n, config.batch_size):
                params = _step(params, train.subset(order[lo:lo + config.batch_size]), ledger, config, prox)
            loss = nll_value(params, train)
        except NumericalOverflowError as exc:
            raise DivergenceError(epoch, config.learning_rate, spec.task_id, str(exc)) from exc
        pen = penalty(ledger, params)
        if not np.all(np.isfinite(params.values)) or not np.isfinite(loss + pen) \
                or loss + pen > 1e3 * start:
            raise DivergenceError(epoch, config.learning_rate, spec.task_id,
                                  f"objective {loss + pen:.4g} vs initial {start:.4g}")
        accs = {s.task_id: accuracy(params, s.test) for s in evaluate_on}
        records.append(ExperimentRecord(config.strategy, lam, spec.task_id, epoch, accs, pen, loss,
                                        time.perf_counter() - t0))
        log.debug("%s task=%s epoch=%d loss=%.4f penalty=%.4f", config.strategy, spec.task_id,
                  epoch, loss, pen)
    return params, records


FisherFn = Callable[[ParamVector, Batch, int], FisherEstimate]


def anchor_for(task_id: str, params: ParamVector, batch: Batch, config: TrainConfig, seed: int,
               fisher_fn: FisherFn | None = None) -> TaskAnchor | None:
    """The anchor a strategy leaves behind after finishing a task (None for finetune)."""
    lam = config.effective_lambda
    sub = batch.subset(slice(0, config.fisher_samples))
    if fisher_fn is not None:
        F = fisher_fn(params, sub, seed)
    elif config.strategy == "finetune":
        return None
    elif config.strategy == "stringent-l2":
        F = FisherEstimate.identity(params)
    else:
        kind = "full" if config.strategy == "ewc-full" else "diagonal"
        cfg = FisherConfig(kind, config.fisher_source, len(sub), seed)
        F = estimate_fisher(params, sub, cfg.kind, cfg.source, cfg.sample_count, cfg.seed)
    return TaskAnchor(task_id, params.copy(), F, lam)


@dataclass
class SequenceResult:
    params: ParamVector
    records: list[ExperimentRecord]
    ledger: PenaltyLedger
    rng_state: dict
    tasks_done: int

    def final_accuracies(self) -> dict[str, float]:
        return dict(self.records[-1].accuracies) if self.records else {}


def run_sequence(stream: TaskStream, config: TrainConfig, *, params: ParamVector | None = None,
                 ledger: PenaltyLedger | None = None, rng_state: dict | None = None,
                 start_task: int = 0, stop_task: int | None = None,
                 fisher_fn: FisherFn | None = None) -> SequenceResult:
    """Train on each task in order, evaluating on every task after every epoch.

    ``params``/``ledger``/``rng_state``/``start_task`` resume a run from a
    checkpoint; ``stop_task`` ends it early. One RNG seeded from
    ``config.seed`` drives minibatch order and Fisher label sampling.
    """
    params = init_params(stream.architecture) if params is None else params.copy()
    ledger = PenaltyLedger() if ledger is None else PenaltyLedger(list(ledger.anchors))
    rng = np.random.default_rng(config.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    stop = len(stream) if stop_task is None else stop_task
    records = []
    for spec in stream.specs[start_task:stop]:
        try:
            params, recs = train_single(params, spec, ledger, config, rng, stream.specs)
        except DivergenceError as exc:
            exc.partial_records = records
            raise
        records += recs
        # one draw per task whatever the strategy, so all strategies share batch orders
        fisher_seed = int(rng.integers(2 ** 32))
        anchor = anchor_for(spec.task_id, params, spec.train, config, fisher_seed, fisher_fn)
        if anchor is not None:
            ledger.add(anchor)
    return SequenceResult(params, records, ledger, rng.bit_generator.state, stop)


@dataclass
class SweepPoint:
    lam: float
    records: list[ExperimentRecord]
    final_accuracies: dict[str, float]
    fisher_displacement: float  # from the first task's anchor
    final_train_loss: float     # last task, without penalty


def _sweep_one(args) -> SweepPoint:
    stream, config, lam = args
    res = run_sequence(stream, replace(config, lam=lam))
    # the first task trains without any penalty, so its anchor (theta*, I) is
    # the same at every lambda, including 0
    anchor = res.ledger.anchors[0]
    disp = anchor.fisher_distance(res.params)
    return SweepPoint(lam, res.records, res.final_accuracies(), disp, res.records[-1].train_loss)


def lambda_sweep(stream: TaskStream, config: TrainConfig, lambdas, workers: int = 1) -> list[SweepPoint]:
    """Identical-seed runs of ``config`` at each lambda; results ordered as given."""
    lambdas = [float(x) for x in lambdas]
    if len(lambdas) < 2:
        raise ValueError("a sweep needs at least two lambda values")
    if config.strategy == "finetune":
        raise ValueError("sweeping lambda needs a regularised strategy")
    jobs = [(stream, config, lam) for lam in lambdas]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_one, jobs))
    return [_sweep_one(j) for j in jobs]
