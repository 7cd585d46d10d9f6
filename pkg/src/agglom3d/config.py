"""YAML run configuration with strict keys.

Every field has a default except the ``teachers`` list, which a config file
must spell out. Unknown keys anywhere are rejected with their full key path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import ConfigError
from .objective import ObjectiveMode
from .teachers import TeacherSpec, default_teachers


@dataclass
class SceneSection:
    num_scenes: int = 1
    extent: list[float] = field(default_factory=lambda: [4.0, 4.0, 2.5])
    num_objects: int = 6
    num_classes: int = 6
    points_per_object: int = 400
    floor_and_walls: bool = True
    points_per_plane: int | None = None
    size_scale: float = 1.0
    voxel_size: float = 0.02
    num_frames: int = 8
    image_width: int = 64
    image_height: int = 48
    # focal length as a fraction of image width
    focal_scale: float = 0.7
    # orbit radius as a fraction of the smaller floor extent; height as a fraction of room height
    camera_radius: float = 0.3
    camera_height: float = 0.7
    target_height: float = 0.3


@dataclass
class FusionSection:
    depth_tol: float = 0.04
    splat_radius: int = 1
    de_mean_mode: str = "per_point"
    # std of additive Gaussian noise on rendered 2D features, before fusion
    feature_jitter: float = 0.0


@dataclass
class StudentSection:
    pe_frequencies: int = 6
    trunk_widths: list[int] = field(default_factory=lambda: [64, 64])


@dataclass
class ObjectiveSection:
    mode: str = "stabilized"


@dataclass
class TrainerSection:
    lr0: float = 1e-4
    epochs: int = 50
    scenes_per_batch: int = 2
    points_per_scene: int = 2048
    lr_decay: float = 0.95
    loop: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = False
    elastic_granularity: float = 0.2
    elastic_magnitude: float = 0.01
    collapse_window: int = 3


@dataclass
class EvalSection:
    ensemble: bool = False
    probe_lambda: float = 1e-3
    probe_train_fraction: float = 0.5
    kmeans_k: int = 6
    kmeans_max_iters: int = 100
    kmeans_normalize: bool = True
    hist_lo: float = -1.0
    hist_hi: float = 1.0
    hist_bins: int = 40


@dataclass
class CellSpec:
    name: str = ""
    teachers: list[str] = field(default_factory=list)
    mode: str = "stabilized"
    # "synthetic" renders scenes per seed; "linear_toy" is the collapse toy problem
    dataset: str = "synthetic"


@dataclass
class PipelineSection:
    seeds: list[int] = field(default_factory=lambda: [0])
    cells: list[CellSpec] = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneSection = field(default_factory=SceneSection)
    teachers: list[TeacherSpec] = field(default_factory=default_teachers)
    fusion: FusionSection = field(default_factory=FusionSection)
    student: StudentSection = field(default_factory=StudentSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)

    def teacher(self, name: str) -> TeacherSpec:
        for t in self.teachers:
            if t.name == name:
                return t
        raise ConfigError(f"unknown teacher {name!r}", "teachers")


_NESTED = {
    "scene": SceneSection, "fusion": FusionSection, "student": StudentSection,
    "objective": ObjectiveSection, "trainer": TrainerSection, "eval": EvalSection,
    "pipeline": PipelineSection,
}


def _build(cls, data: Any, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", f"{path}.{unknown[0]}" if path else unknown[0])
    kwargs = {}
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        if cls is PipelineSection and name == "cells":
            if not isinstance(value, list):
                raise ConfigError("expected a list", key)
            kwargs[name] = [_build(CellSpec, c, f"{key}[{i}]") for i, c in enumerate(value)]
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err), path) from err


def _teacher(data: Any, path: str) -> TeacherSpec:
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", path)
    names = {f.name for f in dataclasses.fields(TeacherSpec)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", f"{path}.{unknown[0]}")
    for required in ("name", "dim"):
        if required not in data:
            raise ConfigError("missing required key", f"{path}.{required}")
    kwargs = dict(data)
    if "aliases" in kwargs:
        kwargs["aliases"] = tuple(tuple(a) for a in kwargs["aliases"])
    try:
        return TeacherSpec(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err), path) from err


def config_from_dict(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", unknown[0])
    if "teachers" not in data:
        raise ConfigError("missing required section", "teachers")
    teachers = data["teachers"]
    if not isinstance(teachers, list) or not teachers:
        raise ConfigError("expected a non-empty list of teachers", "teachers")
    cfg = RunConfig(
        seed=int(data.get("seed", 0)),
        teachers=[_teacher(t, f"teachers[{i}]") for i, t in enumerate(teachers)],
        **{k: _build(cls, data.get(k), k) for k, cls in _NESTED.items()},
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    names = [t.name for t in cfg.teachers]
    if len(set(names)) != len(names):
        raise ConfigError("teacher names must be unique", "teachers")
    try:
        ObjectiveMode(cfg.objective.mode)
    except ValueError:
        raise ConfigError(f"unknown mode {cfg.objective.mode!r}", "objective.mode") from None
    if cfg.fusion.de_mean_mode not in ("per_point", "per_channel"):
        raise ConfigError("expected 'per_point' or 'per_channel'", "fusion.de_mean_mode")
    if not cfg.fusion.feature_jitter >= 0:
        raise ConfigError("must be >= 0", "fusion.feature_jitter")
    if len(cfg.scene.extent) != 3:
        raise ConfigError("extent needs three components", "scene.extent")
    for i, cell in enumerate(cfg.pipeline.cells):
        try:
            ObjectiveMode(cell.mode)
        except ValueError:
            raise ConfigError(f"unknown mode {cell.mode!r}", f"pipeline.cells[{i}].mode") from None
        if cell.dataset not in ("synthetic", "linear_toy"):
            raise ConfigError(f"unknown dataset {cell.dataset!r}", f"pipeline.cells[{i}].dataset")
        if cell.dataset == "synthetic":
            for t in cell.teachers:
                if t not in names:
                    raise ConfigError(f"unknown teacher {t!r}", f"pipeline.cells[{i}].teachers")


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(x):
        if dataclasses.is_dataclass(x):
            return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        if isinstance(x, np.generic):
            return x.item()
        return x

    return plain(cfg)


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"invalid YAML: {err}") from err
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
