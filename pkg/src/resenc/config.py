"""Run configuration: a JSON document with strict key checking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoding import NORMALIZE_MODES


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    D_in: int | None = None
    D_proj: int = 8
    K: int = 8
    n_classes: int | None = None
    # "encoding", or "avg": K=1 with the codeword frozen at zero (avg pooling)
    head: str = "encoding"
    # a number starts every smoothing factor at that shared value instead of the random draw
    smoothing_init: float | None = None


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestones: list[int] = field(default_factory=lambda: [30, 40])
    batch: int = 8
    decay_smoothing: bool = False


@dataclass
class ScheduleConfig:
    epochs: int = 50
    size_cycle: list[int] = field(default_factory=list)


@dataclass
class JointConfig:
    enabled: bool = False
    data2: str | None = None
    loss_weights: list[float] = field(default_factory=lambda: [1.0, 1.0])
    size_cycle2: list[int] = field(default_factory=list)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    seed: int = 0
    normalize: str = "global"

    def to_dict(self) -> dict:
        return {f.name: (vars(getattr(self, f.name)).copy() if f.name in _SECTIONS else getattr(self, f.name))
                for f in fields(self)}


_SECTIONS = {"model": ModelConfig, "optim": OptimConfig, "schedule": ScheduleConfig, "joint": JointConfig}


def _section(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**raw)


def parse_config(raw: dict, source: str = "<config>") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object")
    unknown = sorted(set(raw) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _section(cls, raw[name], f"{source}: {name}")
    for name in ("seed", "normalize"):
        if name in raw:
            kwargs[name] = raw[name]
    cfg = RunConfig(**kwargs)
    _validate(cfg, source)
    return cfg


def _validate(cfg: RunConfig, source: str) -> None:
    if cfg.normalize not in NORMALIZE_MODES:
        raise ConfigError(f"{source}: normalize must be one of {NORMALIZE_MODES}, got {cfg.normalize!r}")
    m, o, s, j = cfg.model, cfg.optim, cfg.schedule, cfg.joint
    for name in ("D_proj", "K"):
        if int(getattr(m, name)) < 1:
            raise ConfigError(f"{source}: model.{name} must be >= 1")
    if m.head not in ("encoding", "avg"):
        raise ConfigError(f"{source}: model.head must be 'encoding' or 'avg', got {m.head!r}")
    if m.smoothing_init is not None and not isinstance(m.smoothing_init, (int, float)):
        raise ConfigError(f"{source}: model.smoothing_init must be a number or null")
    if not o.lr >= 0:
        raise ConfigError(f"{source}: optim.lr must be >= 0")
    if o.batch < 1:
        raise ConfigError(f"{source}: optim.batch must be >= 1")
    if s.epochs < 0:
        raise ConfigError(f"{source}: schedule.epochs must be >= 0")
    if any(int(n) < 1 for n in list(s.size_cycle) + list(j.size_cycle2)):
        raise ConfigError(f"{source}: size cycles must list positive descriptor counts")
    if len(j.loss_weights) != 2:
        raise ConfigError(f"{source}: joint.loss_weights needs two entries")
    if j.data2 is not None and not Path(j.data2).exists():
        raise ConfigError(f"{source}: joint.data2 path {j.data2!r} does not exist")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, str(path))
