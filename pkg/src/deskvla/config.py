"""Run configuration: nested dataclasses loaded from JSON with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .grpo import GrpoConfig
from .intent import GuidanceConfig
from .metrics import RfsParams
from .scenario import KinematicParams
from .train import TrainConfig

SEED_ENV = "MINDVLA_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    vocabulary: str = "3"
    train_scenarios: int = 64
    eval_scenarios: int = 16
    kinematics: KinematicParams = field(default_factory=KinematicParams)


@dataclass
class StreamConfig:
    train_streams: int = 48
    train_frames: int = 16
    eval_streams: int = 8
    eval_frames: int = 42
    iterations: int = 400
    batch_size: int = 8
    chunk_stride: int = 2
    # question topics used for streaming training; the intent question carries the cue
    topics: tuple[str, ...] = ("intent",)
    kinematics: KinematicParams = field(default_factory=lambda: KinematicParams(family="cued", n_agents=2))
    backbone: BackboneConfig = field(
        default_factory=lambda: BackboneConfig(hidden=32, layers=2, ffn=128, head_hidden=64, action_ffn=64)
    )


@dataclass
class FlowConfig:
    steps: int = 2
    compare_steps: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    # desk-scale recipe: longer SFT, faster GRPO over every scenario per iteration
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1500))
    stream: StreamConfig = field(default_factory=StreamConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    metrics: RfsParams = field(default_factory=RfsParams)
    grpo: GrpoConfig = field(default_factory=lambda: GrpoConfig(lr=5e-6, frames_per_iter=16))
    grpo_scenarios: int = 16
    run_dir: str = "runs/desk"


def _build(cls, data, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        origin = typing.get_origin(hint)
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{path}.{key}" if path else key)
        elif origin is tuple or (origin is typing.Union and any(typing.get_origin(a) is tuple
                                                                for a in typing.get_args(hint))):
            value = tuple(value) if value is not None else None
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_dict({})
    return from_dict(json.loads(Path(path).read_text()))


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dump(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def bundled(name: str = "desk") -> Path:
    return Path(__file__).parent / "configs" / f"{name}.json"
