"""Feed-forward softmax classifiers and their negative log-likelihood.

Two parameter layouts are understood:

* MLP layouts ``W0, b0, W1, b1, ...`` (ReLU between layers, softmax head).
* a bias-free binary logistic layout with a single ``(k, 1)`` weight ``w``;
  its two logits are ``[0, x @ w]`` so ``p(y=1|x) = sigmoid(x @ w)``. With
  ``x == 1`` this is the one-parameter Bernoulli model.

Graph builders dispatch on the layout, so a :class:`ParamVector` is enough to
know which model it parameterises.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamVector, ShapeError, make_layout


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("an architecture needs at least input and output sizes")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive: {sizes}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    def layout(self):
        shapes = []
        for i, (a, b) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            shapes += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
        return make_layout(shapes)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ShapeError(f"inputs must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ShapeError(f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} inputs")
        if np.any(y < 0):
            raise ShapeError("labels must be nonnegative class indices")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


def logistic_layout(k: int = 1):
    return make_layout([("w", (k, 1))])


def is_logistic(layout) -> bool:
    return len(layout) == 1 and layout[0].name == "w"


def input_dim(layout) -> int:
    return layout[0].shape[0]


def n_classes(layout) -> int:
    return 2 if is_logistic(layout) else layout[-1].shape[0]


def init_params(arch: Architecture) -> ParamVector:
    """Glorot-uniform weights, zero biases, reproducible from ``arch.seed``."""
    rng = np.random.default_rng(arch.seed)
    layout = arch.layout()
    values = np.zeros(arch.n_params)
    for e in layout:
        if e.name.startswith("W"):
            fan_in, fan_out = e.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            values[e.offset:e.offset + e.size] = rng.uniform(-bound, bound, size=e.size)
    return ParamVector(values, layout)


def zero_params(layout) -> ParamVector:
    return ParamVector(np.zeros(sum(e.size for e in layout)), layout)


def _check_inputs(layout, inputs: np.ndarray) -> None:
    d = input_dim(layout)
    if inputs.ndim != 2 or inputs.shape[1] != d:
        raise ShapeError(f"inputs of shape {inputs.shape} do not match input size {d}")


def logits_graph(theta: Node, inputs: np.ndarray) -> Node:
    layout = theta.attrs["layout"]
    _check_inputs(layout, inputs)
    x = ad.constant(inputs)
    if is_logistic(layout):
        z = ad.matmul_acc(x, ad.take(theta, "w"))
        return ad.matmul_acc(z, ad.constant([[0.0, 1.0]]))
    n_layers = len(layout) // 2
    h = x
    for i in range(n_layers):
        h = ad.matmul_acc(h, ad.take(theta, f"W{i}"), ad.take(theta, f"b{i}"))
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def log_softmax_graph(logits: Node) -> Node:
    shifted = ad.max_shift(logits)
    return shifted + ad.log(ad.reciprocal_sum(ad.exp(shifted)))


def nll_graph(theta: Node, batch: Batch) -> Node:
    layout = theta.attrs["layout"]
    c = n_classes(layout)
    if len(batch) == 0:
        raise ShapeError("empty batch")
    if batch.labels.max() >= c:
        raise ShapeError(f"label {batch.labels.max()} out of range for {c} classes")
    logp = log_softmax_graph(logits_graph(theta, batch.inputs))
    weights = np.zeros((len(batch), c))
    weights[np.arange(len(batch)), batch.labels] = -1.0 / len(batch)
    return ad.total(logp * ad.constant(weights))


def nll_loss(params: ParamVector, batch: Batch) -> Node:
    """Mean negative log-likelihood of the true labels, as a graph root."""
    return nll_graph(ad.parameter(params), batch)


def nll_value(params: ParamVector, batch: Batch) -> float:
    return ad.forward(nll_loss(params, batch))


def predict(params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    shifted = ad.max_shift(logits_graph(ad.parameter(params), inputs))
    e = ad.exp(shifted)
    return ad.forward(e * ad.reciprocal_sum(e))


def accuracy(params: ParamVector, batch: Batch) -> float:
    # argmax breaks ties toward the lowest index
    pred = predict(params, batch.inputs).argmax(axis=1)
    return float(np.mean(pred == batch.labels))
