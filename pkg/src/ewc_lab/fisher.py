"""Fisher information estimates and a finite-difference Hessian to check them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .model import Batch, nll_loss, nll_value, predict

KINDS = ("diagonal", "full")
SOURCES = ("model-sampled", "label-empirical")
FULL_MAX_PARAMS = 2000
HESSIAN_MAX_PARAMS = 200


class CapacityError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class FisherEstimate:
    kind: str
    values: np.ndarray  # (P,) for diagonal, (P, P) for full
    sample_count: int
    source: str
    layout: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown fisher kind {self.kind!r}")
        if self.source not in SOURCES + ("identity",):
            raise ValueError(f"unknown fisher source {self.source!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        want = 1 if self.kind == "diagonal" else 2
        if self.values.ndim != want:
            raise ValueError(f"{self.kind} fisher needs a {want}-D array")

    @property
    def n_params(self) -> int:
        return self.values.shape[0]

    @property
    def diag(self) -> np.ndarray:
        return self.values if self.kind == "diagonal" else np.diag(self.values)

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.values) if self.kind == "diagonal" else self.values

    def quad(self, v: np.ndarray) -> float:
        """``v^T I v``"""
        if self.kind == "diagonal":
            return float(np.dot(self.values * v, v))
        return float(v @ self.values @ v)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.values * v if self.kind == "diagonal" else self.values @ v

    def __eq__(self, other) -> bool:
        if not isinstance(other, FisherEstimate):
            return NotImplemented
        return (self.kind, self.source, self.sample_count) == (other.kind, other.source, other.sample_count) \
            and np.array_equal(self.values, other.values)

    @classmethod
    def identity(cls, params: ParamVector) -> "FisherEstimate":
        return cls("diagonal", np.ones(len(params)), 1, "identity", params.layout)


@dataclass
class HessianEstimate:
    matrix: np.ndarray
    step: float


@dataclass
class PSDReport:
    symmetric: bool
    min_eigenvalue: float
    passed: bool


def per_example_grads_loop(params: ParamVector, batch: Batch, labels: np.ndarray,
                           indices: np.ndarray) -> np.ndarray:
    """Row ``s`` is the gradient of ``-log p(labels[s] | x[indices[s]])``.

    One graph per row; slow, kept as the reference for the batched version.
    """
    out = np.empty((len(indices), len(params)))
    x = batch.inputs
    for s, (i, y) in enumerate(zip(indices, labels)):
        root = nll_loss(params, Batch(x[i:i + 1], np.array([y])))
        ad.forward(root)
        out[s] = ad.backward(root).values
    return out


def per_example_grads(params: ParamVector, batch: Batch, labels: np.ndarray,
                      indices: np.ndarray) -> np.ndarray:
    """Same rows as :func:`per_example_grads_loop` from a single graph.

    Rows of the classifier graph never mix, so the adjoint of row ``s`` at a
    matmul output is that example's backpropagated error; the weight gradient
    is its outer product with the matching input row.
    """
    sub = Batch(batch.inputs[indices], labels)
    n = len(sub)
    root = nll_loss(params, sub)
    ad.forward(root)
    ad.backward(root)
    out = np.zeros((n, len(params)))
    for node in root.attrs["_order"]:
        if node.op is not ad.Op.MATMUL_ACC or node.preds[1].op is not ad.Op.SLICE:
            continue
        e = node.preds[1].attrs["entry"]
        x, g = node.preds[0].value, node.adjoint
        out[:, e.offset:e.offset + e.size] = (x[:, :, None] * g[:, None, :]).reshape(n, -1)
        if len(node.preds) == 3:
            b = node.preds[2].attrs["entry"]
            out[:, b.offset:b.offset + b.size] = g
    # the graph averages over rows; undo that
    return out * n


def estimate_fisher(params: ParamVector, batch: Batch, kind: str = "diagonal",
                    source: str = "model-sampled", sample_count: int | None = None,
                    seed: int = 0) -> FisherEstimate:
    """Average outer product (or elementwise square) of per-example score vectors.

    ``sample_count`` examples are taken by cycling through ``batch`` in order
    (default: one per example). With ``source="model-sampled"`` each label is
    drawn from the model's own predictive distribution using ``seed``;
    ``"label-empirical"`` uses the batch labels.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown fisher kind {kind!r}")
    if source not in SOURCES:
        raise ValueError(f"unknown fisher source {source!r}")
    if len(batch) == 0:
        raise InputError("cannot estimate fisher on an empty batch")
    m = len(batch) if sample_count is None else int(sample_count)
    if m < 1:
        raise InputError("sample_count must be at least 1")
    P = len(params)
    if kind == "full" and P > FULL_MAX_PARAMS:
        raise CapacityError(f"full fisher refused for {P} > {FULL_MAX_PARAMS} parameters")

    idx = np.arange(m) % len(batch)
    if source == "model-sampled":
        probs = predict(params, batch.inputs)[idx]
        rng = np.random.default_rng(seed)
        u = rng.random(m)
        cdf = np.cumsum(probs, axis=1)
        labels = np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)
    else:
        labels = batch.labels[idx]

    grads = per_example_grads(params, batch, labels, idx)
    # fixed-order accumulation keeps results seed-reproducible
    if kind == "diagonal":
        values = np.zeros(P)
        for g in grads:
            values += g * g
    else:
        values = np.zeros((P, P))
        for g in grads:
            values += np.outer(g, g)
    return FisherEstimate(kind, values / m, m, source, params.layout)


def hessian_oracle(params: ParamVector, batch: Batch | None, step: float = 1e-4,
                   loss_fn: Callable[[ParamVector], float] | None = None) -> HessianEstimate:
    """Central-difference Hessian of the mean NLL (or of ``loss_fn``)."""
    if step <= 0:
        raise ValueError("step must be positive")
    P = len(params)
    if P > HESSIAN_MAX_PARAMS:
        raise CapacityError(f"hessian oracle refused for {P} > {HESSIAN_MAX_PARAMS} parameters")
    f = loss_fn if loss_fn is not None else (lambda q: nll_value(q, batch))
    theta = params.values
    h = step

    def at(i, si, j, sj):
        v = theta.copy()
        v[i] += si * h
        v[j] += sj * h
        return f(params.with_values(v))

    H = np.zeros((P, P))
    for i in range(P):
        for j in range(i, P):
            H[i, j] = (at(i, 1, j, 1) - at(i, 1, j, -1) - at(i, -1, j, 1) + at(i, -1, j, -1)) / (4 * h * h)
            H[j, i] = H[i, j]
    return HessianEstimate(H, step)


def validate_psd(estimate: FisherEstimate, tol: float = 1e-8) -> PSDReport:
    if estimate.kind == "diagonal":
        lo = float(estimate.values.min()) if estimate.values.size else 0.0
        return PSDReport(True, lo, lo >= 0.0)
    M = estimate.values
    scale = max(float(np.abs(M).max()), 1.0)
    symmetric = bool(np.abs(M - M.T).max() <= 1e-10 * scale)
    lo = float(np.linalg.eigvalsh((M + M.T) / 2).min())
    return PSDReport(symmetric, lo, symmetric and lo >= -tol)
