"""Run configuration: dataclass configs, JSON round-trip, fingerprinting.

A run is a pure function of its `RunConfig` (given fixed hardware
arithmetic), so everything that influences a run lives here. The
fingerprint hashes only the sections that determine checkpoint
compatibility (dataset geometry + model architecture); method and
optimizer knobs are recorded but do not block loading a checkpoint.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

PARTITION_KINDS = ("kmeans", "spp")
PROTO_SOURCES = ("query", "support")


@dataclass(frozen=True)
class DataConfig:
    """Synthetic episodic benchmark knobs."""

    num_classes: int = 16
    num_folds: int = 4
    fold: int = 0
    image_size: tuple[int, int] = (32, 32)
    bias_rate: float = 0.75
    # scene composition
    radius_frac: tuple[float, float] = (0.22, 0.32)
    distractor_prob: float = 0.3
    max_distractors: int = 1
    min_visible_frac: float = 0.5
    gain_range: tuple[float, float] = (0.75, 1.1)
    confusable_prob: float = 1.0
    bg_two_region_prob: float = 1.0
    plant_radius_frac: tuple[float, float] | None = None


@dataclass(frozen=True)
class BackboneConfig:
    """Toy convolutional feature extractor.

    Two mid stages feed the comparison features, the last stage feeds the
    (gradient-stopped) clustering features. Product of strides is the total
    downsampling factor.
    """

    image_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    stage_channels: tuple[int, int, int] = (8, 16, 16)
    stage_strides: tuple[int, int, int] = (2, 2, 1)

    @property
    def downsample(self) -> int:
        s = 1
        for k in self.stage_strides:
            s *= k
        return s

    @property
    def feature_channels(self) -> int:
        """Channels of the concatenated mid-level features."""
        return self.stage_channels[0] + self.stage_channels[1]

    @property
    def highlevel_channels(self) -> int:
        return self.stage_channels[2]

    @property
    def feature_hw(self) -> tuple[int, int]:
        h, w = self.image_size
        s = self.downsample
        if h % s != 0 or w % s != 0:
            raise ConfigError(f"image size {self.image_size} not divisible by downsample factor {s}")
        return (h // s, w // s)


@dataclass(frozen=True)
class HeadConfig:
    hidden_channels: int = 16


@dataclass(frozen=True)
class MethodConfig:
    """Two-branch method knobs. Defaults: lam=0.5, 3 prototypes, 10 k-means rounds."""

    lam: float = 0.5
    num_prototypes: int = 3
    kmeans_iters: int = 10
    partition: str = "kmeans"
    spp_bins: int = 2
    proto_source: str = "query"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    lr: float = 0.0025
    momentum: float = 0.9
    seed: int = 0
    k_shot_train: int = 1
    k_shot_eval: int = 1
    eval_episodes: int = 200
    checkpoint_every: int = 500
    batch_episodes: int = 1
    # size of the finite pool of training episodes cycled over (0 = sample a
    # fresh episode every step); finite pools reproduce the finite-dataset
    # regime where background memorization persists
    train_pool: int = 0


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        d, m, t = self.data, self.method, self.train
        if d.num_folds <= 0 or d.num_classes % d.num_folds != 0:
            raise ConfigError(f"num_folds={d.num_folds} must divide num_classes={d.num_classes}")
        if not (0 <= d.fold < d.num_folds):
            raise ConfigError(f"fold={d.fold} out of range [0, {d.num_folds})")
        if not (0.0 <= d.bias_rate <= 1.0):
            raise ConfigError(f"bias_rate={d.bias_rate} outside [0, 1]")
        if tuple(self.backbone.image_size) != tuple(d.image_size):
            raise ConfigError("backbone.image_size must match data.image_size")
        self.backbone.feature_hw  # raises on non-divisible image size
        if not (0.0 <= m.lam <= 1.0):
            raise ConfigError(f"lam={m.lam} outside [0, 1]")
        if m.num_prototypes < 0:
            raise ConfigError("num_prototypes must be >= 0 (0 disables the branch)")
        if m.partition not in PARTITION_KINDS:
            raise ConfigError(f"partition must be one of {PARTITION_KINDS}")
        if m.proto_source not in PROTO_SOURCES:
            raise ConfigError(f"proto_source must be one of {PROTO_SOURCES}")
        if m.proto_source == "support" and m.num_prototypes > 1:
            raise ConfigError("proto_source=support supports a single background prototype")
        if t.k_shot_train < 1 or t.k_shot_eval < 1:
            raise ConfigError("k_shot must be >= 1")
        if t.batch_episodes < 1:
            raise ConfigError("batch_episodes must be >= 1")
        return self

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.backbone.feature_hw

    def fingerprint(self) -> str:
        """Hash of the sections a checkpoint must agree on to be loadable."""
        payload = {
            "data": _section_dict(self.data),
            "backbone": _section_dict(self.backbone),
            "head": _section_dict(self.head),
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict[str, Any]:
        return {
            "data": _section_dict(self.data),
            "backbone": _section_dict(self.backbone),
            "head": _section_dict(self.head),
            "method": _section_dict(self.method),
            "train": _section_dict(self.train),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        try:
            cfg = cls(
                data=_section_from(DataConfig, d.get("data", {})),
                backbone=_section_from(BackboneConfig, d.get("backbone", {})),
                head=_section_from(HeadConfig, d.get("head", {})),
                method=_section_from(MethodConfig, d.get("method", {})),
                train=_section_from(TrainConfig, d.get("train", {})),
                out_dir=d.get("out_dir", "runs/default"),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc
        return cfg.validate()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)


def make_run_config(image_size: int | tuple[int, int] = (32, 32), **overrides: Any) -> RunConfig:
    """Convenience constructor keeping data/backbone image sizes in sync.

    `overrides` may address nested fields with section prefixes, e.g.
    ``make_run_config(method_lam=0.0, train_steps=200)``.
    """
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    sections: dict[str, dict[str, Any]] = {"data": {}, "backbone": {}, "head": {}, "method": {}, "train": {}}
    top: dict[str, Any] = {}
    for key, value in overrides.items():
        prefix, _, rest = key.partition("_")
        if prefix in sections and rest:
            sections[prefix][rest] = value
        elif key == "out_dir":
            top[key] = value
        else:
            raise ConfigError(f"unknown override {key!r}")
    sections["data"]["image_size"] = tuple(image_size)
    sections["backbone"]["image_size"] = tuple(image_size)
    try:
        cfg = RunConfig(
            data=DataConfig(**sections["data"]),
            backbone=BackboneConfig(**sections["backbone"]),
            head=HeadConfig(**sections["head"]),
            method=MethodConfig(**sections["method"]),
            train=TrainConfig(**sections["train"]),
            **top,
        )
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from exc
    return cfg.validate()


def _section_dict(section: Any) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(section):
        v = getattr(section, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _section_from(cls: type, d: dict[str, Any]) -> Any:
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in d:
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown config fields for {cls.__name__}: {sorted(unknown)}")
    return cls(**kwargs)
