"""Experiment configuration: one YAML file, strictly validated before anything runs.

Example::

    stream:
      generator: permuted
      n_tasks: 2
      input_dim: 16
      separation: 4.0
      seed: 0
    train:
      strategy: ewc-diagonal
      learning_rate: 0.1
      epochs: 20
      lambda: 100
    output:
      directory: out/forgetting
    sweep:
      lambdas: [0, 1, 10, 100]

Unknown keys, wrong types and out-of-range values are reported as
``file:line: message``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .tasks import StreamConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (accepted python types, dataclass field name)
_STREAM = {
    "generator": ((str,), "generator"),
    "n_tasks": ((int,), "n_tasks"),
    "input_dim": ((int,), "input_dim"),
    "classes": ((int,), "classes"),
    "separation": ((int, float), "separation"),
    "n_train": ((int,), "n_train"),
    "n_test": ((int,), "n_test"),
    "seed": ((int,), "seed"),
    "angle": ((int, float), "angle"),
    "hidden": ((list,), "hidden"),
    "arch_seed": ((int,), "arch_seed"),
}
_TRAIN = {
    "strategy": ((str,), "strategy"),
    "learning_rate": ((int, float), "learning_rate"),
    "epochs": ((int,), "epochs"),
    "batch_size": ((int,), "batch_size"),
    "lambda": ((int, float, type(None)), "lam"),
    "fisher_samples": ((int,), "fisher_samples"),
    "fisher_source": ((str,), "fisher_source"),
    "penalty_step": ((str,), "penalty_step"),
    "seed": ((int,), "seed"),
}
_OUTPUT = {
    "directory": ((str,), "directory"),
    "formats": ((list,), "formats"),
    "checkpoint_format": ((str,), "checkpoint_format"),
    "validate_math": ((bool,), "validate_math"),
}
_SWEEP = {
    "lambdas": ((list,), "lambdas"),
    "workers": ((int,), "workers"),
}
_SECTIONS = {"stream": _STREAM, "train": _TRAIN, "output": _OUTPUT, "sweep": _SWEEP}


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    formats: tuple[str, ...] = ("csv", "json")
    checkpoint_format: str = "bin"
    validate_math: bool = False

    def __post_init__(self):
        object.__setattr__(self, "formats", tuple(self.formats))
        bad = set(self.formats) - {"csv", "json"}
        if bad:
            raise ValueError(f"formats: unsupported {sorted(bad)}; use csv and/or json")
        if self.checkpoint_format not in ("bin", "json"):
            raise ValueError("checkpoint_format must be 'bin' or 'json'")


@dataclass(frozen=True)
class SweepConfig:
    lambdas: tuple[float, ...] = ()
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if any(x < 0 for x in self.lambdas):
            raise ValueError("lambdas must be nonnegative")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    sweep: SweepConfig | None = None
    source: str = ""

    def to_dict(self) -> dict:
        d = {"stream": asdict(self.stream), "train": asdict(self.train), "output": asdict(self.output)}
        if self.sweep is not None:
            d["sweep"] = asdict(self.sweep)
        return d

    def digest(self) -> str:
        """Hash of everything that affects results (output location excluded)."""
        d = self.to_dict()
        d.pop("output")
        if "sweep" in d:
            d["sweep"].pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       workers: int | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, stream=replace(cfg.stream, seed=seed), train=replace(cfg.train, seed=seed))
        if out is not None:
            cfg = replace(cfg, output=replace(cfg.output, directory=out))
        if workers is not None:
            cfg = replace(cfg, sweep=replace(cfg.sweep or SweepConfig(), workers=workers))
        return cfg


def _line(node) -> int:
    return node.start_mark.line + 1


def _plain(node):
    return yaml.safe_load(yaml.serialize(node))


def _section(name: str, node, schema: dict, where: str, cls):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{where}:{_line(node)}: section [{name}] must be a mapping")
    kwargs, key_lines = {}, {}
    for knode, vnode in node.value:
        key = knode.value
        if key not in schema:
            raise ConfigError(f"{where}:{_line(knode)}: unknown key '{key}' in [{name}]; "
                              f"allowed: {', '.join(schema)}")
        types, target = schema[key]
        value = _plain(vnode)
        if isinstance(value, bool) and bool not in types:
            ok = False
        else:
            ok = isinstance(value, types)
        if not ok:
            names = "/".join("null" if t is type(None) else t.__name__ for t in types)
            raise ConfigError(f"{where}:{_line(vnode)}: [{name}] {key} must be {names}, got {value!r}")
        kwargs[target] = value
        key_lines[target] = _line(knode)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        hit = next((ln for k, ln in key_lines.items() if k in msg), _line(node))
        raise ConfigError(f"{where}:{hit}: [{name}] {msg}") from None


def parse_config(text: str, where: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else 0
        raise ConfigError(f"{where}:{line}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if root is None:
        raise ConfigError(f"{where}:1: empty configuration")
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{where}:{_line(root)}: top level must be a mapping of sections")
    parts = {}
    classes = {"stream": StreamConfig, "train": TrainConfig, "output": OutputConfig, "sweep": SweepConfig}
    for knode, vnode in root.value:
        name = knode.value
        if name not in _SECTIONS:
            raise ConfigError(f"{where}:{_line(knode)}: unknown section '{name}'; "
                              f"allowed: {', '.join(_SECTIONS)}")
        parts[name] = _section(name, vnode, _SECTIONS[name], where, classes[name])
    return ExperimentConfig(**parts, source=where)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))
