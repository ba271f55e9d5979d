"""Run configuration: nested dataclasses loaded from strict JSON."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .geometry import ProblemInstance, ProblemKind
from .local_search import PolishSettings, PushSettings, SrpSchedule, default_push_settings
from .reward import FinetuneSettings
from .sampler import SamplerSettings
from .training import TrainHyper


class ConfigError(ValueError):
    """Invalid configuration (unknown key, wrong type, violated invariant)."""


@dataclass
class ModelSettings:
    width: int = 64
    depth: int = 2
    heads: int = 4
    freqs: int = 16
    ff_mult: int = 4


def default_model_settings(kind: ProblemKind) -> ModelSettings:
    if ProblemKind(kind) is ProblemKind.SPHERES:
        return ModelSettings(width=512, depth=2, heads=8)
    return ModelSettings(width=256, depth=6, heads=8)


@dataclass
class LoopSettings:
    boost_rounds: int = 1
    initial_samples: int = 64
    samples_per_round: int = 64
    top_fraction: float = 0.5
    seed: int = 0
    workers: int = 1
    histogram_bins: int = 20

    def __post_init__(self):
        if self.boost_rounds < 1:
            raise ValueError("boost_rounds must be >= 1")
        if self.initial_samples < 1 or self.samples_per_round < 1:
            raise ValueError("sample counts must be >= 1")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError("top_fraction must lie in (0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class IOSettings:
    out_dir: str = "runs/default"
    dataset: str = "dataset.jsonl"
    checkpoint: str = "model.ckpt"


@dataclass
class RunConfig:
    instance: ProblemInstance
    push: PushSettings
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainHyper = field(default_factory=TrainHyper)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)
    loop: LoopSettings = field(default_factory=LoopSettings)
    io: IOSettings = field(default_factory=IOSettings)

    @property
    def out_dir(self) -> Path:
        return Path(self.io.out_dir)

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.out_dir / p

    def to_dict(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if isinstance(obj, ProblemInstance):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, where)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _build(cls, data, where: str, base=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    if base is not None:
        kwargs = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    for k, v in data.items():
        if dataclasses.is_dataclass(hints[k]) and base is not None:
            kwargs[k] = _build(hints[k], v, f"{where}.{k}", getattr(base, k))
        else:
            kwargs[k] = _coerce(hints[k], v, f"{where}.{k}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _instance_from(data) -> ProblemInstance:
    if not isinstance(data, dict):
        raise ConfigError("instance: expected an object")
    unknown = sorted(set(data) - {"kind", "count", "dim", "box_side"})
    if unknown:
        raise ConfigError(f"instance: unknown key(s) {', '.join(unknown)}")
    try:
        kind = ProblemKind(data["kind"])
        return ProblemInstance(kind, int(data["count"]), int(data.get("dim", 2)), float(data.get("box_side", 1.0)))
    except KeyError as exc:
        raise ConfigError(f"instance: missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"instance: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)}")
    if "instance" not in data:
        raise ConfigError("missing key 'instance'")
    instance = _instance_from(data["instance"])
    push = _build(PushSettings, data.get("push", {}), "push", default_push_settings(instance.kind))
    parts = {}
    for name, cls in (("model", ModelSettings), ("train", TrainHyper), ("sampler", SamplerSettings),
                      ("finetune", FinetuneSettings), ("loop", LoopSettings), ("io", IOSettings)):
        base = default_model_settings(instance.kind) if name == "model" else cls()
        parts[name] = _build(cls, data.get(name, {}), name, base)
    return RunConfig(instance=instance, push=push, **parts)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
