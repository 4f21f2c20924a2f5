"""Experiment configuration: nested sections, strict keys, YAML on disk."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import yaml

from .network import BackboneConfig

BASES = ("sup", "mt", "uamt")
VARIANTS = ("plain", "semisam")
BACKENDS = ("synthetic", "external_adapter", "null")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    m_labeled: int = 1
    n_test: int = 20
    seed: int = 0
    patch_shape: tuple = (128, 128, 128)
    fg_prob: float = 0.5


@dataclass
class FrameworkConfig:
    base: str = "mt"
    variant: str = "plain"

    @property
    def name(self) -> str:
        return f"{self.base}/{self.variant}"


@dataclass
class OptimConfig:
    lr0: float = 0.01
    decay_every: int = 2500
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    w_base: float = 0.1


@dataclass
class TrainConfig:
    t_max: int = 6000
    labeled_bs: int = 2
    unlabeled_bs: int = 2
    seed: int = 1337
    deterministic: bool = True
    noise_sigma: float = 0.1
    noise_clip: float = 0.2
    teacher_input_noise: bool = True
    uamt_passes: int = 8
    ema_cap: float = 0.99
    eval_every: int = 500
    checkpoint_every: int = 500


@dataclass
class OracleConfig:
    backend: str = "synthetic"
    k_positive: int = 1
    radius: int = 1
    flip_rate: float = 0.05
    spool: Optional[str] = None
    timeout: float = 30.0
    cache_size: int = 256


@dataclass
class EvalConfig:
    stride: Optional[tuple] = None
    unit: str = "voxel"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    framework: FrameworkConfig = field(default_factory=FrameworkConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        fw, tr, d = self.framework, self.train, self.data
        if fw.base not in BASES:
            raise ConfigError(f"framework.base must be one of {BASES}, got {fw.base!r}")
        if fw.variant not in VARIANTS:
            raise ConfigError(f"framework.variant must be one of {VARIANTS}, got {fw.variant!r}")
        if fw.base == "sup" and fw.variant != "plain":
            raise ConfigError("supervised-only training has no oracle branch")
        if self.oracle.backend not in BACKENDS:
            raise ConfigError(f"oracle.backend must be one of {BACKENDS}")
        if fw.variant == "semisam" and self.oracle.backend == "external_adapter" and not self.oracle.spool:
            raise ConfigError("oracle.spool is required for the external adapter")
        if self.oracle.k_positive < 1:
            raise ConfigError("oracle.k_positive must be >= 1")
        if tr.t_max <= 0 or tr.labeled_bs < 1 or tr.unlabeled_bs < 0:
            raise ConfigError("train.t_max and batch sizes must be positive")
        if fw.base != "sup" and tr.unlabeled_bs < 1:
            raise ConfigError("semi-supervised training needs unlabeled_bs >= 1")
        if tr.uamt_passes < 2:
            raise ConfigError("train.uamt_passes must be >= 2")
        if len(d.patch_shape) != 3:
            raise ConfigError("data.patch_shape must have three entries")
        div = 2 ** (self.backbone.depth - 1)
        if any(p % div for p in d.patch_shape):
            raise ConfigError(f"patch_shape {d.patch_shape} must be divisible by {div}")
        if self.eval.stride is not None and any(s > p or s < 1 for s, p in zip(self.eval.stride, d.patch_shape)):
            raise ConfigError("eval.stride must be in [1, patch_shape] per axis")
        if self.eval.unit not in ("voxel", "mm"):
            raise ConfigError("eval.unit must be 'voxel' or 'mm'")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {where or '<root>'}: {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in raw.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}".lstrip("."))
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw or {}, "").validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    cfg = config_from_dict(raw)
    # relative data/output paths resolve against the config file
    base = path.parent
    if not Path(cfg.data.root).is_absolute():
        cfg.data.root = str((base / cfg.data.root).resolve())
    if not Path(cfg.output_dir).is_absolute():
        cfg.output_dir = str((base / cfg.output_dir).resolve())
    if cfg.oracle.spool and not Path(cfg.oracle.spool).is_absolute():
        cfg.oracle.spool = str((base / cfg.oracle.spool).resolve())
    return cfg


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
