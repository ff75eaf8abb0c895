"""Strict JSON run configuration.

Unknown keys are fatal at every nesting level: a typo in ``epsilon`` should
stop a run, not silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .adversarial import AdvTrainConfig, AttackConfig
from .distill import DistillConfig
from .fed_sim import FLConfig

PIPELINES = ("vanilla", "trajsyn", "trajsynfed", "fat")


class ConfigError(ValueError):
    pass


class UnknownConfigKeyError(ConfigError):
    pass


class MissingSectionError(ConfigError):
    pass


class OutputDirError(ConfigError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    classes: int = 3
    per_class: int = 200
    test_per_class: int = 300
    dims: tuple = (32,)
    spread: float = 0.15
    strong_dims: int = 3
    weak_amplitude: float = 0.06
    means_seed: int = 0
    images_path: str | None = None
    labels_path: str | None = None
    test_images_path: str | None = None
    test_labels_path: str | None = None
    cifar_train_path: str | None = None
    cifar_test_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("blobs", "idx", "cifar10"):
            raise ConfigError(f"dataset.kind: unknown dataset kind {self.kind!r}")
        dims = (self.dims,) if isinstance(self.dims, int) else tuple(self.dims)
        object.__setattr__(self, "dims", dims)


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "mlp"
    layer_sizes: tuple = (32, 3)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(self.layer_sizes))


@dataclass(frozen=True)
class TrajSynFedConfig:
    server_adv_epochs: int = 5


@dataclass(frozen=True)
class TimingConfig:
    warmup: int = 10
    min_steps: int = 100


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "fl": FLConfig,
    "distill": DistillConfig,
    "attack": AttackConfig,
    "adv_train": AdvTrainConfig,
    "trajsynfed": TrajSynFedConfig,
    "timing": TimingConfig,
}

# Sections whose seed is always taken from the run seed.
_SEEDED = ("fl", "distill", "attack", "adv_train")

_REQUIRED = {
    "vanilla": ("dataset", "model", "fl", "attack"),
    "fat": ("dataset", "model", "fl", "attack"),
    "trajsyn": ("dataset", "model", "fl", "distill", "attack", "adv_train"),
    "trajsynfed": ("dataset", "model", "fl", "distill", "attack", "adv_train"),
}


@dataclass(frozen=True)
class RunConfig:
    pipeline: str
    seed: int
    output_dir: str
    dataset: DatasetConfig
    model: ModelConfig
    fl: FLConfig
    attack: AttackConfig
    distill: DistillConfig | None = None
    adv_train: AdvTrainConfig | None = None
    trajsynfed: TrajSynFedConfig = field(default_factory=TrajSynFedConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    run_id: str | None = None

    def to_dict(self) -> dict:
        out = {"pipeline": self.pipeline, "seed": self.seed, "output_dir": self.output_dir}
        if self.run_id is not None:
            out["run_id"] = self.run_id
        for name in _SECTIONS:
            section = getattr(self, name)
            if section is None:
                continue
            d = dataclasses.asdict(section)
            if name in _SEEDED:
                d.pop("seed", None)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    @property
    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.pipeline}-s{self.seed}"


def _build(name: str, cls, raw, seed: int | None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    if name in _SEEDED:
        allowed.discard("seed")
    for key in raw:
        if key not in allowed:
            raise UnknownConfigKeyError(f"unknown config key '{name}.{key}'")
    kwargs = dict(raw)
    if name in _SEEDED:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(raw: dict, seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    """Validate a config mapping; ``seed``/``output_dir`` override the file."""
    top = {"pipeline", "seed", "output_dir", "run_id"} | set(_SECTIONS)
    for key in raw:
        if key not in top:
            raise UnknownConfigKeyError(f"unknown config key '{key}'")
    if "pipeline" not in raw:
        raise MissingSectionError("missing required key 'pipeline'")
    pipeline = raw["pipeline"]
    if pipeline not in PIPELINES:
        raise ConfigError(f"pipeline: unknown pipeline {pipeline!r}, expected one of {PIPELINES}")
    seed = int(raw.get("seed", 0) if seed is None else seed)
    output_dir = output_dir if output_dir is not None else raw.get("output_dir", "runs/" + pipeline)
    for name in _REQUIRED[pipeline]:
        if name not in raw:
            raise MissingSectionError(f"pipeline {pipeline!r} requires section '{name}'")
    sections = {name: _build(name, cls, raw[name], seed) for name, cls in _SECTIONS.items() if name in raw}
    return RunConfig(pipeline=pipeline, seed=seed, output_dir=str(output_dir),
                     run_id=raw.get("run_id"), **sections)


def load_config(path, seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(raw, seed=seed, output_dir=output_dir)


def prepare_output_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputDirError(f"cannot create output dir {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise OutputDirError(f"output dir {path} is not writable")
    return path


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
