"""The consolidation penalty: one quadratic well per finished task.

Training minimises ``nll(theta) + sum_k lambda_k/2 (theta - theta*_k)^T I_k (theta - theta*_k)``,
the negation of the log-posterior being maximised; additive constants are
dropped since they do not move the optimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamVector, ShapeError
from .fisher import FisherEstimate, estimate_fisher
from .model import Batch, nll_graph


@dataclass(frozen=True)
class FisherConfig:
    kind: str = "diagonal"
    source: str = "model-sampled"
    sample_count: int | None = None
    seed: int = 0


@dataclass(frozen=True)
class TaskAnchor:
    task_id: str
    theta_star: ParamVector
    fisher: FisherEstimate
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.fisher.n_params != len(self.theta_star):
            raise ShapeError("fisher and theta* disagree on parameter count")
        if self.fisher.layout and tuple(self.fisher.layout) != self.theta_star.layout:
            raise ShapeError("fisher and theta* have different layouts")
        # snapshot so later training cannot reach the arrays
        ts = self.theta_star.copy()
        ts.values.flags.writeable = False
        fv = self.fisher.values.copy()
        fv.flags.writeable = False
        object.__setattr__(self, "theta_star", ts)
        object.__setattr__(self, "fisher", FisherEstimate(
            self.fisher.kind, fv, self.fisher.sample_count, self.fisher.source, self.fisher.layout))

    def displacement(self, params: ParamVector) -> np.ndarray:
        params.check_layout(self.theta_star)
        return params.values - self.theta_star.values

    def penalty(self, params: ParamVector) -> float:
        d = self.displacement(params)
        return 0.5 * self.lam * self.fisher.quad(d)

    def fisher_distance(self, params: ParamVector) -> float:
        """``sqrt((theta - theta*)^T I (theta - theta*))``"""
        return float(np.sqrt(max(self.fisher.quad(self.displacement(params)), 0.0)))


@dataclass
class PenaltyLedger:
    anchors: list[TaskAnchor] = field(default_factory=list)

    def __post_init__(self):
        ids = [a.task_id for a in self.anchors]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate task ids in ledger: {ids}")

    def add(self, anchor: TaskAnchor) -> None:
        if any(a.task_id == anchor.task_id for a in self.anchors):
            raise ValueError(f"task {anchor.task_id!r} already consolidated")
        self.anchors.append(anchor)

    def __len__(self) -> int:
        return len(self.anchors)

    def __iter__(self):
        return iter(self.anchors)

    def active(self) -> list[TaskAnchor]:
        return [a for a in self.anchors if a.lam != 0.0]


def penalty(ledger: PenaltyLedger, params: ParamVector) -> float:
    return float(sum(a.penalty(params) for a in ledger))


def penalty_gradient(ledger: PenaltyLedger, params: ParamVector) -> ParamVector:
    g = np.zeros(len(params))
    for a in ledger:
        g += a.lam * a.fisher.matvec(a.displacement(params))
    return params.with_values(g)


def penalty_graph(ledger: PenaltyLedger, theta: Node) -> Node | None:
    """Graph for the penalty on the parameter leaf ``theta``; None if nothing is active."""
    terms = []
    for a in ledger.active():
        if tuple(theta.attrs["layout"]) != a.theta_star.layout:
            raise ShapeError("parameter layouts differ")
        d = theta - ad.constant(a.theta_star.values)
        if a.fisher.kind == "diagonal":
            terms.append(ad.total(d * d * ad.constant(0.5 * a.lam * a.fisher.values)))
        else:
            Fd = ad.matmul_acc(d, ad.constant(0.5 * a.lam * a.fisher.values))
            terms.append(ad.total(Fd * d))
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def total_loss(ledger: PenaltyLedger, params: ParamVector, batch: Batch) -> Node:
    """``nll + penalty`` as one graph. Anchors with lambda 0 add no nodes at all."""
    theta = ad.parameter(params)
    loss = nll_graph(theta, batch)
    pen = penalty_graph(ledger, theta)
    return loss if pen is None else loss + pen


def consolidate(task_id: str, params: ParamVector, batch: Batch, lam: float,
                fisher_config: FisherConfig = FisherConfig()) -> TaskAnchor:
    """Freeze ``params`` and the Fisher estimated there into a new anchor."""
    F = estimate_fisher(params, batch, fisher_config.kind, fisher_config.source,
                        fisher_config.sample_count, fisher_config.seed)
    return TaskAnchor(task_id, params.copy(), F, float(lam))


class ProximalPenalty:
    """Exact minimiser of ``1/(2 lr) |theta - v|^2 + penalty(theta)``.

    Used by the trainer to apply the penalty implicitly, which stays stable at
    any lambda where an explicit gradient step on the penalty would blow up.
    """

    def __init__(self, ledger: PenaltyLedger, lr: float):
        active = ledger.active()
        self.empty = not active
        if self.empty:
            return
        P = len(active[0].theta_star)
        if all(a.fisher.kind == "diagonal" for a in active):
            self.diagonal = True
            w = np.zeros(P)
            c = np.zeros(P)
            for a in active:
                w += a.lam * a.fisher.values
                c += a.lam * a.fisher.values * a.theta_star.values
            self.denom = 1.0 + lr * w
            self.shift = lr * c
        else:
            self.diagonal = False
            A = np.eye(P)
            c = np.zeros(P)
            for a in active:
                A += lr * a.lam * a.fisher.matrix
                c += lr * a.lam * a.fisher.matvec(a.theta_star.values)
            self.A = A
            self.shift = c

    def __call__(self, v: np.ndarray) -> np.ndarray:
        if self.empty:
            return v
        if self.diagonal:
            return (v + self.shift) / self.denom
        return np.linalg.solve(self.A, v + self.shift)
