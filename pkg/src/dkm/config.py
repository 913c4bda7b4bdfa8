"""Run configuration: nested dataclasses loaded from YAML with strict validation.

Unknown keys and ill-typed values raise :class:`ConfigError` naming the
dotted path of the offending key. Missing keys take the defaults below;
``dump_yaml`` writes every field, so a snapshot materialises the defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .domains import TargetShift
from .nets import Arch


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    meta_lr: float = 1e-4            # eta: mapping layer and domain classifier
    outer_lr: float = 1e-4           # beta: encoder outer update
    inner_lr: float = 0.01           # alpha: episode classifier SGD
    inner_steps: int = 5
    pretrain_lr: float = 1e-3
    pretrain_epochs: int = 50        # T
    batch_size: int = 32
    kappa: float = 0.1
    tau: float = 0.5
    lambda_range: tuple[float, float] = (0.3, 0.7)
    meta_episodes: int = 2000
    optimizer: str = "adam"
    view_noise: float = 0.1          # SSL view perturbation, in units of sigma_class
    novel_bank_per_class: int = 8
    generator_updates_encoder: bool = False
    calibration_steps: int = 1
    calibration_lr: float = 0.01
    checkpoint_every: int = 0

    def validate(self, path: str = "train") -> None:
        for name in ("meta_lr", "outer_lr", "inner_lr", "pretrain_lr", "tau", "calibration_lr"):
            if getattr(self, name) < 0 or (name == "tau" and self.tau == 0):
                raise ConfigError(f"{path}.{name}: must be positive")
        lo, hi = self.lambda_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"{path}.lambda_range: must satisfy 0 <= lo <= hi <= 1")
        if self.kappa < 0:
            raise ConfigError(f"{path}.kappa: must be nonnegative")
        if self.pretrain_epochs < 1:
            raise ConfigError(f"{path}.pretrain_epochs: must be at least 1")
        if self.batch_size < 2:
            raise ConfigError(f"{path}.batch_size: must be at least 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"{path}.optimizer: expected 'adam' or 'sgd'")
        for name in ("inner_steps", "meta_episodes", "calibration_steps", "checkpoint_every",
                     "novel_bank_per_class"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{path}.{name}: must be nonnegative")


@dataclass(frozen=True)
class ArchConfig:
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    mapper_hidden: int = 32
    domain_hidden: int = 32

    def validate(self, path: str = "arch") -> None:
        for name, v in (("feature_dim", self.feature_dim), ("mapper_hidden", self.mapper_hidden),
                        ("domain_hidden", self.domain_hidden)):
            if v <= 0:
                raise ConfigError(f"{path}.{name}: must be positive")
        if any(h <= 0 for h in self.hidden):
            raise ConfigError(f"{path}.hidden: widths must be positive")


@dataclass(frozen=True)
class TargetConfig:
    name: str = "heavy"
    angle: float = 60.0
    scale_jitter: float = 0.3


DEFAULT_TARGETS = (
    TargetConfig("mild", 20.0, 0.1),
    TargetConfig("moderate", 45.0, 0.2),
    TargetConfig("heavy", 75.0, 0.3),
)


@dataclass(frozen=True)
class BenchmarkConfig:
    in_dim: int = 16
    n_train: int = 64
    n_heldout: int = 16
    n_target: int = 20
    sigma_class: float = 1.0
    signal_dims: int = 8
    per_class_source: int = 60
    per_class_target: int = 40
    targets: tuple[TargetConfig, ...] = DEFAULT_TARGETS
    eval_target: str = "heavy"
    emd_space: str = "input"

    def validate(self, path: str = "benchmark") -> None:
        for name in ("in_dim", "n_train", "n_target", "per_class_source", "per_class_target"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{path}.{name}: must be positive")
        if self.n_heldout < 0:
            raise ConfigError(f"{path}.n_heldout: must be nonnegative")
        if not 0 < self.signal_dims <= self.in_dim:
            raise ConfigError(f"{path}.signal_dims: must lie in [1, in_dim]")
        if self.sigma_class <= 0:
            raise ConfigError(f"{path}.sigma_class: must be positive")
        names = [t.name for t in self.targets]
        if len(set(names)) != len(names):
            raise ConfigError(f"{path}.targets: duplicate target names")
        if self.eval_target not in names:
            raise ConfigError(f"{path}.eval_target: {self.eval_target!r} is not among {names}")
        if self.emd_space not in ("input", "feature"):
            raise ConfigError(f"{path}.emd_space: expected 'input' or 'feature'")

    def shifts(self) -> list[TargetShift]:
        return [TargetShift(t.name, t.angle, t.scale_jitter) for t in self.targets]


@dataclass(frozen=True)
class ProtocolConfig:
    way: int = 5
    shot: int = 5
    query: int = 15
    tasks: int = 1000

    def validate(self, path: str = "protocol") -> None:
        for name in ("way", "shot", "query", "tasks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{path}.{name}: must be at least 1")
        if self.way < 2:
            raise ConfigError(f"{path}.way: must be at least 2")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    regime: str = "mixed"
    out: str = "runs/default"
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    def validate(self) -> "RunConfig":
        if self.regime not in ("supervised", "ssl", "mixed"):
            raise ConfigError("regime: expected one of supervised, ssl, mixed")
        self.train.validate()
        self.arch.validate()
        self.benchmark.validate()
        self.protocol.validate()
        need = self.protocol.shot + self.protocol.query
        if self.benchmark.per_class_target < need or self.benchmark.per_class_source < need:
            raise ConfigError(f"benchmark.per_class_target: need at least shot+query={need} per class")
        if self.protocol.way > min(self.benchmark.n_train, self.benchmark.n_target):
            raise ConfigError("protocol.way: exceeds the number of available classes")
        return self

    def model_arch(self) -> Arch:
        return Arch(
            in_dim=self.benchmark.in_dim,
            hidden=tuple(self.arch.hidden),
            feature_dim=self.arch.feature_dim,
            mapper_hidden=self.arch.mapper_hidden,
            domain_hidden=self.arch.domain_hidden,
        )

    def with_(self, **changes) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``with_(**{"train.kappa": 0.0})``."""
        data = to_dict(self)
        for key, value in changes.items():
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"{key}: unknown key")
            node[parts[-1]] = to_dict(value) if dataclasses.is_dataclass(value) else value
        return from_dict(data)

    def digest(self) -> str:
        """Hash of every setting except ``out``, so relocating a run keeps its identity."""
        return hashlib.sha256(dump_yaml(replace(self, out="")).encode()).hexdigest()[:16]


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"{where}: unknown key")
    kwargs = {}
    for name in names:
        if name in data:
            where = f"{path}.{name}" if path else name
            kwargs[name] = _coerce(hints[name], data[name], where)
    return cls(**kwargs)


def from_dict(data) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_dict(v) for v in obj]
    return obj


def load_config(path: str | Path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: malformed YAML ({exc})") from exc
    return from_dict(data)


def dump_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)
