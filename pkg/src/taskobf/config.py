"""Run configuration: a YAML file mapped onto typed sections with strict keys."""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .obfuscator import ArchConfig
from .synthdata import SceneSpec
from .trainer import AttackConfig, TrainConfig
from .utility import UtilityConfig

CONFIG_VERSION = 1
METHODS = ("obfuscator", "blur", "detect-blur")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class DataConfig:
    image_size: tuple = (64, 64)
    n_task_objects: tuple = (1, 4)
    n_persons: tuple = (0, 2)
    n_identities: int = 8
    background: int = 0
    noise_std: float = 0.02
    n_utility_train: int = 1000
    n_train: int = 500
    n_test: int = 100
    utility_seed: int = 100
    train_seed: int = 1
    test_seed: int = 2

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.n_task_objects = tuple(self.n_task_objects)
        self.n_persons = tuple(self.n_persons)
        for name in ("n_utility_train", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def scene(self, seed: int) -> SceneSpec:
        return SceneSpec(
            image_size=self.image_size,
            n_task_objects=self.n_task_objects,
            n_persons=self.n_persons,
            n_identities=self.n_identities,
            background=self.background,
            noise_std=self.noise_std,
            seed=seed,
        )


@dataclass
class SweepConfig:
    methods: tuple = METHODS
    lambdas: tuple = (0.0, 1.0, 10.0)
    blur_ks: tuple = (1, 5, 9, 17, 33, 65)
    detect_blur_ks: tuple = (1, 9, 33, 65)
    detect_blur_thresh: float = 0.3
    detect_blur_pad: float = 0.1
    identity_steps: int = 400
    max_inversions: int = 1

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.blur_ks = tuple(int(k) for k in self.blur_ks)
        self.detect_blur_ks = tuple(int(k) for k in self.detect_blur_ks)
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; expected a subset of {METHODS}")


@dataclass
class BenchConfig:
    resolutions: tuple = ((64, 64), (640, 640), (1280, 1280))
    n_frames: int = 20
    warmup: int = 2

    def __post_init__(self):
        self.resolutions = tuple(tuple(int(v) for v in r) for r in self.resolutions)


@dataclass
class RunConfig:
    run_id: str = "run"
    output_dir: str = "runs"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    utility: UtilityConfig = field(default_factory=UtilityConfig)
    obfuscator: ArchConfig = field(default_factory=ArchConfig)
    deobfuscator_width_ratio: float = 2.0
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    version: int = CONFIG_VERSION

    @property
    def out(self) -> Path:
        return Path(self.output_dir) / self.run_id

    def to_dict(self) -> dict:
        return _plain(asdict(self))


_SECTIONS = {
    "data": DataConfig,
    "utility": UtilityConfig,
    "obfuscator": ArchConfig,
    "train": TrainConfig,
    "attack": AttackConfig,
    "sweep": SweepConfig,
    "bench": BenchConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config key {where}.{unknown[0]}" + (f" (and {len(unknown) - 1} more)" if len(unknown) > 1 else ""))
    kwargs = dict(raw)
    if cls is AttackConfig and "arch" in kwargs:
        kwargs["arch"] = _build(ArchConfig, kwargs["arch"], f"{where}.arch")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(raw: Optional[dict]) -> RunConfig:
    raw = dict(raw or {})
    version = raw.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}; expected {CONFIG_VERSION}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw.pop(name), name)
    top = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS) - {"version"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]}")
    kwargs.update(raw)
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def bundled_config(name: str = "demo") -> Path:
    return Path(__file__).parent / "configs" / f"{name}.cfg"
