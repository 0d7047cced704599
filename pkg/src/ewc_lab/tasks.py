"""Seeded synthetic task streams: Gaussian clusters and input-transformed variants."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import Architecture, Batch

SCENARIOS = ("task-incremental", "domain-incremental")
GENERATORS = ("permuted", "rotated", "independent")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    train: Batch
    test: Batch
    scenario: str
    params: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.train.inputs.shape[1]


def _class_means(rng: np.random.Generator, dim: int, classes: int, separation: float) -> np.ndarray:
    """``classes`` points with every pairwise distance equal to ``separation``."""
    if classes == 2:
        u = rng.normal(size=dim)
        u /= np.linalg.norm(u)
        return np.stack([-u, u]) * separation / 2
    if classes > dim:
        raise ValueError(f"{classes} equidistant class means need input_dim >= {classes}")
    simplex = np.eye(classes) * separation / np.sqrt(2)
    simplex -= simplex.mean(axis=0)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return simplex @ q[:classes]


def _draw(rng: np.random.Generator, means: np.ndarray, n: int) -> Batch:
    classes, dim = means.shape
    labels = rng.permutation(np.arange(n) % classes)
    return Batch(means[labels] + rng.normal(size=(n, dim)), labels)


def gen_gaussian_clusters(seed: int, n_train: int, n_test: int, input_dim: int, classes: int,
                          separation: float, task_id: str = "task0") -> TaskSpec:
    """Isotropic unit-variance clusters whose means sit ``separation`` apart.

    Labels are exactly balanced (round robin, then shuffled); train and test
    come from independent child streams of ``seed``.
    """
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    means_ss, train_ss, test_ss = np.random.SeedSequence(seed).spawn(3)
    means = _class_means(np.random.default_rng(means_ss), input_dim, classes, separation)
    train = _draw(np.random.default_rng(train_ss), means, n_train)
    test = _draw(np.random.default_rng(test_ss), means, n_test)
    params = dict(seed=seed, n_train=n_train, n_test=n_test, input_dim=input_dim,
                  classes=classes, separation=separation, transform={"kind": "none"})
    return TaskSpec(task_id, train, test, "task-incremental", params)


def gen_permuted_variant(base: TaskSpec, permutation_seed: int | None = None,
                         permutation=None, task_id: str | None = None) -> TaskSpec:
    """Shuffle input coordinates by a fixed permutation; labels untouched."""
    d = base.input_dim
    if permutation is None:
        permutation = np.random.default_rng(permutation_seed).permutation(d)
    perm = np.asarray(permutation)
    if sorted(perm.tolist()) != list(range(d)):
        raise ValueError("not a permutation of the input coordinates")
    params = dict(base.params, transform={"kind": "permute", "seed": permutation_seed,
                                          "permutation": perm.tolist()})
    return TaskSpec(task_id or f"{base.task_id}-perm{permutation_seed}",
                    Batch(base.train.inputs[:, perm], base.train.labels),
                    Batch(base.test.inputs[:, perm], base.test.labels),
                    "domain-incremental", params)


def rotate_inputs(x: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    out = x.copy()
    out[:, 0] = c * x[:, 0] - s * x[:, 1]
    out[:, 1] = s * x[:, 0] + c * x[:, 1]
    return out


def gen_rotated_variant(base: TaskSpec, angle: float, task_id: str | None = None) -> TaskSpec:
    """Rotate the first two input coordinates by ``angle`` radians."""
    if base.input_dim < 2:
        raise ValueError("rotation needs at least two input dimensions")
    params = dict(base.params, transform={"kind": "rotate", "angle": angle})
    return TaskSpec(task_id or f"{base.task_id}-rot{angle:g}",
                    Batch(rotate_inputs(base.train.inputs, angle), base.train.labels),
                    Batch(rotate_inputs(base.test.inputs, angle), base.test.labels),
                    "domain-incremental", params)


@dataclass(frozen=True)
class StreamConfig:
    generator: str = "permuted"
    n_tasks: int = 2
    input_dim: int = 16
    classes: int = 2
    separation: float = 4.0
    n_train: int = 1000
    n_test: int = 1000
    seed: int = 0
    angle: float = 0.5
    hidden: tuple[int, ...] = (32,)
    arch_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        for name in ("n_tasks", "input_dim", "classes", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.separation < 0:
            raise ConfigError("separation must be nonnegative")

    def architecture(self) -> Architecture:
        return Architecture((self.input_dim, *self.hidden, self.classes), self.arch_seed)


@dataclass
class TaskStream:
    specs: list[TaskSpec]
    architecture: Architecture
    config: StreamConfig | None = None

    def __post_init__(self):
        ids = [s.task_id for s in self.specs]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"task ids must be unique: {ids}")
        for s in self.specs:
            if s.input_dim != self.architecture.input_dim:
                raise ConfigError(f"task {s.task_id} has input dim {s.input_dim}, "
                                  f"architecture expects {self.architecture.input_dim}")
            top = max(s.train.labels.max(), s.test.labels.max())
            if top >= self.architecture.n_classes:
                raise ConfigError(f"task {s.task_id} uses label {top} but the head has "
                                  f"{self.architecture.n_classes} classes")

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    @property
    def task_ids(self) -> list[str]:
        return [s.task_id for s in self.specs]

    def manifest(self) -> dict:
        """Generator parameters only; enough to rebuild the stream."""
        return {
            "config": asdict(self.config) if self.config else None,
            "architecture": {"layer_sizes": list(self.architecture.layer_sizes),
                             "seed": self.architecture.seed},
            "tasks": [{"task_id": s.task_id, "scenario": s.scenario, "params": s.params}
                      for s in self.specs],
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        for s in self.specs:
            for b in (s.train, s.test):
                h.update(b.inputs.tobytes())
                h.update(b.labels.tobytes())
        return h.hexdigest()


def build_stream(config: StreamConfig) -> TaskStream:
    if config.n_tasks < 2:
        raise ConfigError("a stream needs at least two tasks")
    c = config
    ids = [chr(ord("A") + i) if c.n_tasks <= 26 else f"T{i}" for i in range(c.n_tasks)]
    specs = []
    if c.generator == "independent":
        for i, tid in enumerate(ids):
            specs.append(gen_gaussian_clusters(c.seed + i, c.n_train, c.n_test, c.input_dim,
                                               c.classes, c.separation, tid))
    else:
        base = gen_gaussian_clusters(c.seed, c.n_train, c.n_test, c.input_dim, c.classes,
                                     c.separation, ids[0])
        # every task in a transformed stream shares one head and needs no task id
        base = dataclasses.replace(base, scenario="domain-incremental")
        specs.append(base)
        for i, tid in enumerate(ids[1:], start=1):
            if c.generator == "permuted":
                specs.append(gen_permuted_variant(base, c.seed + i, task_id=tid))
            else:
                specs.append(gen_rotated_variant(base, i * c.angle, task_id=tid))
    return TaskStream(specs, c.architecture(), c)


def manifest_json(stream: TaskStream) -> str:
    return json.dumps(stream.manifest(), indent=2, sort_keys=True)
