"""Hierarchical run configuration with strict key checking.

Every field has a default matching the reference CIFAR protocol, so a minimal
config only needs to name the dataset and the student.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    name: str = "synthetic"
    root: str | None = None
    params: dict = field(default_factory=dict)


@dataclass
class StudentSection:
    arch: str | None = "resnet20"
    spec: dict | None = None


@dataclass
class TeacherSection:
    arch: str = "resnet56"
    mode: str = "per-subset"  # or "shared"
    epochs: int = 240
    checkpoints: tuple[str, ...] = ()
    lr_milestones: tuple[int, ...] = (150, 180, 210)
    cache_logits: bool = True


@dataclass
class PartitionSection:
    num_subsets: int = 3
    ratios: tuple[float, ...] = (1.0, 1.0, 1.0)
    mode: str = "class"
    seed: int = 0


@dataclass
class ScheduleSection:
    total_epochs: int = 240
    advance_epochs: tuple[int, ...] = (50, 80)
    advance_mode: str = "fixed"
    plateau_delta: float = 0.1
    plateau_patience: int = 10
    block_allocation: tuple[tuple[str, ...], ...] | None = None
    fine_tune_all: bool = False


@dataclass
class LossSection:
    tau: float = 4.0
    alpha: float = 0.3
    kd_scale: str = "tau2"


@dataclass
class OptimizerSection:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    init_lr: float = 0.05
    lr_milestones: tuple[int, ...] = (150, 180, 210)
    lr_gamma: float = 0.1


@dataclass
class OutputSection:
    out_dir: str = "runs"
    run_id: str = "ed"
    seed: int = 0
    deterministic: bool = True
    eval_every: int = 1
    checkpoint_every: int = 1


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    student: StudentSection = field(default_factory=StudentSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def run_dir(self) -> Path:
        return Path(self.output.out_dir) / self.output.run_id

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        cfg = _build(cls, d or {}, "")
        validate(cfg)
        return cfg

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            d = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"config is not valid YAML: {e}") from e
        if d is not None and not isinstance(d, dict):
            raise ConfigError("config must be a mapping at the top level")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        return cls.from_yaml(p.read_text())


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(_coerce(args[0], x, f"{where}[]") for x in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        return dict(value)
    return value


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        where = prefix or "top level"
        raise ConfigError(f"unknown keys at {where}: {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        tp = hints[f.name]
        where = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, d[f.name] or {}, where + ".")
        else:
            kwargs[f.name] = _coerce(tp, d[f.name], where)
    return cls(**kwargs)


def validate(cfg: RunConfig) -> None:
    """Cross-section checks. Raises ConfigError naming the offending fields."""
    p, s, t, o, opt, loss = cfg.partition, cfg.schedule, cfg.teacher, cfg.output, cfg.optimizer, cfg.loss
    T = p.num_subsets
    if T < 1:
        raise ConfigError("partition.num_subsets must be positive")
    if len(p.ratios) != T:
        raise ConfigError(f"partition.ratios has {len(p.ratios)} entries but partition.num_subsets={T}")
    if any(r <= 0 for r in p.ratios):
        raise ConfigError("partition.ratios must all be positive")
    if p.mode not in ("class", "sample"):
        raise ConfigError(f"partition.mode must be 'class' or 'sample', got {p.mode!r}")
    if len(s.advance_epochs) != T - 1:
        raise ConfigError(
            f"schedule.advance_epochs has {len(s.advance_epochs)} entries; partition.num_subsets={T} needs {T - 1}"
        )
    if list(s.advance_epochs) != sorted(set(s.advance_epochs)) or any(e <= 0 for e in s.advance_epochs):
        raise ConfigError("schedule.advance_epochs must be positive and strictly increasing")
    if s.advance_epochs and s.advance_epochs[-1] >= s.total_epochs:
        raise ConfigError("schedule.advance_epochs must be below schedule.total_epochs")
    if s.block_allocation is not None and len(s.block_allocation) != T:
        raise ConfigError(f"schedule.block_allocation has {len(s.block_allocation)} stages, partition.num_subsets={T}")
    if s.advance_mode not in ("fixed", "plateau"):
        raise ConfigError(f"schedule.advance_mode must be 'fixed' or 'plateau', got {s.advance_mode!r}")
    if any(m >= s.total_epochs for m in opt.lr_milestones):
        raise ConfigError("optimizer.lr_milestones must be below schedule.total_epochs")
    if opt.batch_size < 1 or opt.init_lr <= 0:
        raise ConfigError("optimizer.batch_size and optimizer.init_lr must be positive")
    if t.mode not in ("per-subset", "shared"):
        raise ConfigError(f"teacher.mode must be 'per-subset' or 'shared', got {t.mode!r}")
    if t.checkpoints:
        want = 1 if t.mode == "shared" else T
        if len(t.checkpoints) != want:
            raise ConfigError(f"teacher.checkpoints lists {len(t.checkpoints)} files; teacher.mode={t.mode} needs {want}")
    if t.epochs < 0:
        raise ConfigError("teacher.epochs must be non-negative")
    if not loss.tau > 0 or not 0 <= loss.alpha <= 1 or loss.kd_scale not in ("tau2", "1"):
        raise ConfigError("loss: need tau > 0, 0 <= alpha <= 1, kd_scale in {tau2, 1}")
    if (cfg.student.arch is None) == (cfg.student.spec is None):
        raise ConfigError("student: give exactly one of student.arch or student.spec")
    if o.eval_every < 1 or o.checkpoint_every < 1:
        raise ConfigError("output.eval_every and output.checkpoint_every must be positive")
    if not o.run_id or "/" in o.run_id:
        raise ConfigError("output.run_id must be a non-empty name without '/'")
