"""Global JSON configuration: one auditable home for every knob.

Parsing is strict: unknown keys anywhere in the tree are rejected. Dotted
CLI overrides (`--set stages.stage1.steps=500`) are applied to the raw
dict before construction, so they behave exactly like file content.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .nets import (
    ArchConfig,
    default_discriminator_config,
    default_generator_config,
    default_task_config,
)
from .synthcells import DEFAULT_STYLES, DomainStyle, HsvJitterRanges
from .trainer import OptimSettings, StageConfig


@dataclass
class DataSection:
    size: int = 64
    train_scenes: int = 2000
    test_scenes: int = 500
    hard_negative_rate: float = 0.5
    styles: dict = field(
        default_factory=lambda: {k: v.to_dict() for k, v in DEFAULT_STYLES.items()}
    )

    def domain_styles(self) -> dict[str, DomainStyle]:
        if set(self.styles) != {"S", "T"}:
            raise ConfigError("data.styles must define exactly domains S and T")
        return {k: DomainStyle.from_dict(v) for k, v in self.styles.items()}


@dataclass
class AugmentSection:
    hsv: HsvJitterRanges = field(default_factory=HsvJitterRanges)
    pca_magnitude: float = 0.1


@dataclass
class ArchSection:
    generator: ArchConfig = field(default_factory=default_generator_config)
    discriminator: ArchConfig = field(
        default_factory=lambda: default_discriminator_config(64)
    )
    task: ArchConfig = field(default_factory=default_task_config)


@dataclass
class TaskTrainSection:
    steps: int = 800
    batch_size: int = 16
    eval_every: int = 100
    optimizer: OptimSettings = field(default_factory=OptimSettings)


@dataclass
class StageSettings:
    steps: int
    batch_size: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimSettings = field(default_factory=OptimSettings)
    checkpoint_every: int = 500
    eval_every: int = 200
    divergence_patience: int = 10

    def stage_config(self, stage: int) -> StageConfig:
        return StageConfig(
            stage=stage,
            steps=self.steps,
            batch_size=self.batch_size,
            weights=self.weights,
            optimizer=self.optimizer,
            checkpoint_every=self.checkpoint_every,
            eval_every=self.eval_every,
            divergence_patience=self.divergence_patience,
        )


@dataclass
class StagesSection:
    stage1: StageSettings = field(default_factory=lambda: StageSettings(steps=2000))
    stage2: StageSettings = field(default_factory=lambda: StageSettings(steps=1000))
    stage3: StageSettings = field(default_factory=lambda: StageSettings(steps=1000))

    def stage_config(self, stage: int) -> StageConfig:
        settings = {1: self.stage1, 2: self.stage2, 3: self.stage3}.get(stage)
        if settings is None:
            raise ConfigError(f"no such stage: {stage}")
        return settings.stage_config(stage)


@dataclass
class EvalSection:
    bins: int = 64
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    top_k: int = 3
    curve_subset: int = 256  # images per periodic accuracy sample
    lambda_magnitudes: list = field(default_factory=lambda: [1.0, 10.0, 100.0])


@dataclass
class GlobalConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    arch: ArchSection = field(default_factory=ArchSection)
    task_train: TaskTrainSection = field(default_factory=TaskTrainSection)
    stages: StagesSection = field(default_factory=StagesSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.data.train_scenes % 2 or self.data.test_scenes % 2:
            raise ConfigError("scene counts must be even (1:1 class balance)")
        if self.data.train_scenes <= 0 or self.data.test_scenes <= 0:
            raise ConfigError("scene counts must be positive")
        self.data.domain_styles()
        for cfg in (self.arch.generator, self.arch.discriminator, self.arch.task):
            cfg.validate()
        if self.arch.generator.in_channels != 2:
            raise ConfigError("generator input must be the 2-channel GM")
        for size in (self.arch.discriminator.size, self.arch.task.size):
            if size != self.data.size:
                raise ConfigError("arch input sizes must match data.size")
        if self.arch.generator.size != self.data.size:
            raise ConfigError("arch input sizes must match data.size")
        if self.eval.bins < 2:
            raise ConfigError("eval.bins must be >= 2")
        if not self.eval.seeds:
            raise ConfigError("eval.seeds must not be empty")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(value, target_type, path: str):
    origin = typing.get_origin(target_type)
    if dataclasses.is_dataclass(target_type):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected object, got {type(value).__name__}")
        return _build_dataclass(target_type, value, path)
    if origin in (list,):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list")
        return list(value)
    if origin in (tuple,):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected list")
        return tuple(value)
    if origin is dict or target_type is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected object")
        return dict(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected boolean, got {value!r}")
        return value
    return value


def _build_dataclass(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - field_names
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"unknown config key(s) in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub_path = f"{path}.{name}" if path else name
        kwargs[name] = _convert(value, hints[name], sub_path)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def config_from_dict(data: dict) -> GlobalConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _build_dataclass(GlobalConfig, data)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> GlobalConfig:
    """Load and validate a config file, then apply dotted-path overrides."""
    if path is None:
        raw: dict = {}
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    for override in overrides or []:
        apply_override(raw, override)
    return config_from_dict(raw)


def apply_override(raw: dict, override: str) -> None:
    """Apply one `a.b.c=value` override in place; value parses as JSON with
    bare-string fallback."""
    if "=" not in override:
        raise ConfigError(f"override {override!r} must look like path=value")
    dotted, text = override.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {override!r} has an empty path")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {override!r} descends into a non-object")
    node[keys[-1]] = value
