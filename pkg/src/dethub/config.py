"""Run configuration: one nested dataclass schema, YAML files and dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

ADAPTATION_MODES = ("query-adaptation", "global-embedding", "instance-embedding")


@dataclass
class ModelSection:
    hidden_dim: int = 64
    feature_channels: int = 64
    backbone_width: int = 32
    backbone_depth: int = 2
    heads: int = 8
    stages: int = 6
    linear_test_mode: bool = False


@dataclass
class QueriesSection:
    count: int = 300


@dataclass
class DyConvSection:
    kernel_size: int = 3
    bottleneck_ratio: float = 0.25


@dataclass
class EmbedderSection:
    kind: str = "stub"
    embed_dim: int = 64
    seed: int = 0
    contextual: bool = True


@dataclass
class PromptSection:
    max_length: int = 512


@dataclass
class AdaptationSection:
    mode: str = "query-adaptation"
    rpn: bool = True
    decoder: bool = True


@dataclass
class LossSection:
    align_weight: float = 1.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    cost_class: float = 2.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0
    focal_gamma: float = 0.0


@dataclass
class OptimizerSection:
    lr: float = 5e-5
    weight_decay: float = 1e-4
    milestones: list = field(default_factory=lambda: [0.78, 0.93])
    gamma: float = 0.1
    grad_clip: float = 1.0


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 4
    image_size: int = 128
    log_every: int = 10
    checkpoint_every: int = 0
    deterministic: bool = True
    seed: int = 0


@dataclass
class SamplerSection:
    seed: int = 0
    balancing: bool = False
    rebalance_threshold: float = 0.01
    homogeneous_batches: bool = False


@dataclass
class EvalSection:
    top_k: int = 100
    split: str = "val"


@dataclass
class TrainConfig:
    model: ModelSection = field(default_factory=ModelSection)
    queries: QueriesSection = field(default_factory=QueriesSection)
    dyconv: DyConvSection = field(default_factory=DyConvSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    adaptation: AdaptationSection = field(default_factory=AdaptationSection)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    datasets: list = field(default_factory=list)

    def validate(self) -> "TrainConfig":
        ms = list(self.optimizer.milestones)
        if any(not 0 < m < 1 for m in ms) or ms != sorted(ms) or len(set(ms)) != len(ms):
            raise ConfigError(f"optimizer.milestones must be ascending fractions in (0, 1), got {ms}")
        if self.adaptation.mode not in ADAPTATION_MODES:
            raise ConfigError(f"adaptation.mode must be one of {ADAPTATION_MODES}")
        if self.queries.count < 1 or self.model.stages < 1 or self.train.steps < 1:
            raise ConfigError("queries.count, model.stages and train.steps must be positive")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        if self.prompt.max_length < 2:
            raise ConfigError("prompt.max_length must be >= 2")
        k = self.dyconv.kernel_size
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"dyconv.kernel_size must be odd and >= 1, got {k}")
        if not 0 < self.dyconv.bottleneck_ratio < 1:
            raise ConfigError("dyconv.bottleneck_ratio must lie in (0, 1)")
        if not 0 < self.sampler.rebalance_threshold < 1:
            raise ConfigError("sampler.rebalance_threshold must lie in (0, 1)")
        return self

    def effective_adaptation(self) -> tuple[bool, bool]:
        """(rpn, decoder) adaptation flags; global-embedding mode disables both."""
        if self.adaptation.mode == "global-embedding":
            return False, False
        return self.adaptation.rpn, self.adaptation.decoder

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def copy_config(cfg: TrainConfig, overrides: dict | None = None) -> TrainConfig:
    data = apply_overrides(cfg.to_dict(), overrides or {})
    return from_dict(data).validate()


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, default, prefix + name)
    return cls(**kwargs)


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key} expects a list, got {value!r}")
    return value


def from_dict(data: dict | None) -> TrainConfig:
    return _build(TrainConfig, data or {})


def flatten(data: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in data.items():
        if isinstance(v, dict):
            out.update(flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def apply_overrides(data: dict, overrides: list[str] | dict) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    if isinstance(overrides, dict):
        items = overrides.items()
    else:
        items = ((k, yaml.safe_load(v)) for k, v in map(_split, overrides))
    valid = flatten(TrainConfig().to_dict())
    for key, value in items:
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r}")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return data


def _split(override: str) -> tuple[str, str]:
    if "=" not in override:
        raise ConfigError(f"override {override!r} is not of the form key=value")
    key, value = override.split("=", 1)
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides=()) -> TrainConfig:
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data = apply_overrides(data, overrides)
    return from_dict(data).validate()


def dump_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")


def describe_keys() -> str:
    """Every config key with its default, one per line."""
    flat = flatten(TrainConfig().to_dict())
    width = max(len(k) for k in flat)
    return "\n".join(f"  {k.ljust(width)}  {json.dumps(v)}" for k, v in flat.items())
