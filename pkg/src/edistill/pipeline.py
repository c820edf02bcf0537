"""Config-driven orchestration of the partition, teacher and distillation phases."""

from __future__ import annotations

import dataclasses
import logging
import os
from contextlib import contextmanager
from pathlib import Path

import torch

from edistill.config import ConfigError, RunConfig
from edistill.data import SplitDataset, load_dataset
from edistill.losses import DistillConfig
from edistill.model import StageModel, Student, StudentSpec, assemble_stage_model, builtin_spec
from edistill.partition import SubDatasetPartition, partition, subset_view
from edistill.report import MetricsLog, forgetting_matrix, read_metrics, render_report, top1_accuracy
from edistill.schedule import OptimizerConfig, StageSchedule
from edistill.teachers import (
    LogitStore,
    StoreMismatch,
    TeacherAssignment,
    accuracy_of,
    cache_teacher_outputs,
    load_teacher,
    save_teacher,
    store_key,
    train_teacher,
)
from edistill.trainer import Interrupted, RunContext, RunReport, run_stages

log = logging.getLogger(__name__)

PARTITION_FILE = "partition.txt"
METRICS_FILE = "metrics.tsv"
LOGIT_FILE = "teacher_logits.bin"


def build_dataset(cfg: RunConfig) -> SplitDataset:
    try:
        return load_dataset(cfg.dataset.name, cfg.dataset.root, **cfg.dataset.params)
    except TypeError as e:
        raise ConfigError(f"dataset.params: {e}") from e
    except ValueError as e:
        raise ConfigError(f"dataset.name: {e}") from e


def _spec(arch: str | None, spec: dict | None, data: SplitDataset, field: str) -> StudentSpec:
    in_ch = data.input_shape[0]
    try:
        if spec is not None:
            d = dict(spec)
            d.setdefault("num_classes", data.num_classes)
            d.setdefault("in_channels", in_ch)
            return StudentSpec.from_dict(d)
        return builtin_spec(arch, data.num_classes, in_ch)
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"{field}: {e}") from e


def student_spec(cfg: RunConfig, data: SplitDataset) -> StudentSpec:
    return _spec(cfg.student.arch, cfg.student.spec, data, "student")


def teacher_spec(cfg: RunConfig, data: SplitDataset) -> StudentSpec:
    return _spec(cfg.teacher.arch, None, data, "teacher.arch")


def build_schedule(cfg: RunConfig, spec: StudentSpec, num_stages: int | None = None) -> StageSchedule:
    s = cfg.schedule
    T = num_stages or cfg.partition.num_subsets
    try:
        if num_stages == 1:
            return StageSchedule(1, (tuple(spec.block_ids),), (), s.total_epochs)
        kw = dict(advance_mode=s.advance_mode, plateau_delta=s.plateau_delta, plateau_patience=s.plateau_patience)
        if s.block_allocation is not None:
            sched = StageSchedule(T, s.block_allocation, s.advance_epochs, s.total_epochs, **kw)
            sched.check_blocks(spec.block_ids)
            return sched
        return StageSchedule.even(spec.block_ids, T, s.advance_epochs, s.total_epochs, **kw)
    except ValueError as e:
        raise ConfigError(f"schedule: {e}") from e


def optimizer_config(cfg: RunConfig) -> OptimizerConfig:
    return OptimizerConfig(**dataclasses.asdict(cfg.optimizer))


def distill_config(cfg: RunConfig) -> DistillConfig:
    return DistillConfig(**dataclasses.asdict(cfg.loss))


def make_partition(cfg: RunConfig, data: SplitDataset) -> SubDatasetPartition:
    p = cfg.partition
    n_items = data.num_classes if p.mode == "class" else len(data.train)
    if p.num_subsets > n_items:
        what = "classes" if p.mode == "class" else "samples"
        raise ConfigError(
            f"partition.num_subsets={p.num_subsets} exceeds the {n_items} {what} of dataset.name={cfg.dataset.name!r}"
        )
    try:
        return partition(data.train.labels, p.num_subsets, p.ratios, p.mode, p.seed)
    except ValueError as e:
        raise ConfigError(f"partition: {e}") from e


def load_or_make_partition(cfg: RunConfig, data: SplitDataset) -> SubDatasetPartition:
    path = cfg.run_dir / PARTITION_FILE
    if path.exists():
        return SubDatasetPartition.from_text(path.read_text())
    return make_partition(cfg, data)


def snapshot_config(cfg: RunConfig) -> None:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "config.yaml").write_text(cfg.to_yaml())


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive lock on a run directory; failures leave an ERROR marker."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"run directory {run_dir} is locked by another process ({lock})") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    except Interrupted:
        raise
    except BaseException as e:
        (run_dir / "ERROR").write_text(f"{type(e).__name__}: {e}\n")
        raise
    else:
        (run_dir / "ERROR").unlink(missing_ok=True)
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Phases


def write_partition(cfg: RunConfig, data: SplitDataset | None = None) -> tuple[Path, SubDatasetPartition]:
    data = data or build_dataset(cfg)
    part = make_partition(cfg, data)
    snapshot_config(cfg)
    path = cfg.run_dir / PARTITION_FILE
    path.write_text(part.to_text())
    return path, part


def _teacher_opt(cfg: RunConfig) -> OptimizerConfig:
    return dataclasses.replace(optimizer_config(cfg), lr_milestones=tuple(cfg.teacher.lr_milestones))


def train_teachers(cfg: RunConfig, data: SplitDataset | None = None, baseline: bool = False) -> list[dict]:
    """Train (or validate) the teachers and write ``teachers/summary.tsv``.

    Per-subset mode trains one teacher per sub-dataset; shared mode, and the
    vanilla KD baseline, use a single teacher on the full training set.
    """
    data = data or build_dataset(cfg)
    tdir = cfg.run_dir / "teachers"
    tspec = teacher_spec(cfg, data)
    opt = _teacher_opt(cfg)
    seed = cfg.output.seed
    rows = []
    if baseline or cfg.teacher.mode == "shared":
        if cfg.teacher.checkpoints and cfg.teacher.mode == "shared":
            path = Path(cfg.teacher.checkpoints[0])
            model = load_teacher(path, data.num_classes)
        else:
            path = tdir / "teacher_full.ckpt"
            model, _ = train_teacher(tspec, data.train.x, data.train.y, opt, cfg.teacher.epochs, seed=seed * 7919)
            save_teacher(path, model, None, accuracy_of(model, data.train.x, data.train.y))
        rows.append({"teacher": "full", "checkpoint": str(path),
                     "train_top1": accuracy_of(model, data.train.x, data.train.y),
                     "test_top1": accuracy_of(model, data.test.x, data.test.y)})
    else:
        part = load_or_make_partition(cfg, data)
        for t in range(1, part.num_subsets + 1):
            tr = subset_view(data.train, part, t, "train").tensors()
            te = subset_view(data.test, part, t, "test").tensors()
            if cfg.teacher.checkpoints:
                path = Path(cfg.teacher.checkpoints[t - 1])
                model = load_teacher(path, data.num_classes)
            else:
                path = tdir / f"teacher{t}.ckpt"
                model, acc = train_teacher(tspec, *tr, opt, cfg.teacher.epochs, seed=seed * 7919 + t)
                save_teacher(path, model, t, acc)
            rows.append({"teacher": str(t), "checkpoint": str(path),
                         "train_top1": accuracy_of(model, *tr), "test_top1": accuracy_of(model, *te)})
    tdir.mkdir(parents=True, exist_ok=True)
    lines = ["teacher\tcheckpoint\ttrain_top1\ttest_top1"]
    lines += [f"{r['teacher']}\t{r['checkpoint']}\t{r['train_top1']:.2f}\t{r['test_top1']:.2f}" for r in rows]
    (tdir / ("summary_full.tsv" if baseline else "summary.tsv")).write_text("\n".join(lines) + "\n")
    return rows


def load_teachers(cfg: RunConfig, data: SplitDataset, num_stages: int, baseline: bool = False) -> TeacherAssignment:
    tdir = cfg.run_dir / "teachers"
    if baseline or cfg.teacher.mode == "shared":
        if cfg.teacher.checkpoints and cfg.teacher.mode == "shared":
            path = Path(cfg.teacher.checkpoints[0])
        else:
            path = tdir / "teacher_full.ckpt"
        if not path.exists():
            train_teachers(cfg, data, baseline=True)
        return TeacherAssignment.shared(load_teacher(path, data.num_classes), num_stages, str(path))
    paths = [Path(p) for p in cfg.teacher.checkpoints] or [tdir / f"teacher{t}.ckpt" for t in range(1, num_stages + 1)]
    if not all(p.exists() for p in paths):
        train_teachers(cfg, data)
    teachers = {t: load_teacher(p, data.num_classes) for t, p in enumerate(paths, start=1)}
    return TeacherAssignment(teachers, "per-subset", {t: str(p) for t, p in enumerate(paths, start=1)})


def _logit_store(cfg: RunConfig, data, part, assignment, run_dir: Path) -> LogitStore | None:
    if not cfg.teacher.cache_logits:
        return None
    path = run_dir / LOGIT_FILE
    key = store_key(data.train, part, assignment)
    if path.exists():
        try:
            return LogitStore.load(path, expected_hash=key)
        except StoreMismatch:
            log.warning("stale logit store at %s, rebuilding", path)
    return cache_teacher_outputs(assignment, data.train, part, path)


def baseline_config(cfg: RunConfig) -> RunConfig:
    """Single-stage vanilla KD on the full training set with one teacher."""
    out = dataclasses.replace(cfg.output, run_id=cfg.output.run_id + "-kd")
    return dataclasses.replace(cfg, output=out)


def run_education_distillation(
    cfg: RunConfig,
    resume: bool = False,
    baseline: bool = False,
    data: SplitDataset | None = None,
    stop_after_epoch: int | None = None,
    render: bool = True,
) -> RunReport:
    """Run the whole pipeline for one config and write its artifacts under ``run_dir``."""
    if baseline:
        cfg = baseline_config(cfg)
    data = data or build_dataset(cfg)
    spec = student_spec(cfg, data)
    T = 1 if baseline else cfg.partition.num_subsets
    schedule = build_schedule(cfg, spec, 1 if baseline else None)
    run_dir = cfg.run_dir
    with run_lock(run_dir):
        if not resume:
            for old in [*run_dir.glob("stage*_epoch*.ckpt"), run_dir / "final.ckpt"]:
                old.unlink(missing_ok=True)
        snapshot_config(cfg)
        if baseline:
            part = SubDatasetPartition.single(data.train.labels)
        else:
            part = load_or_make_partition(cfg, data)
        (run_dir / PARTITION_FILE).write_text(part.to_text())
        assignment = load_teachers(cfg, data, T, baseline=baseline)
        assignment.validate(T, data.num_classes)
        digests = assignment.digests()
        ctx = RunContext(
            spec=spec,
            schedule=schedule,
            optim=optimizer_config(cfg),
            distill=distill_config(cfg),
            data=data,
            partition=part,
            teachers=assignment,
            log=MetricsLog(run_dir / METRICS_FILE),
            run_id=cfg.output.run_id,
            run_dir=run_dir,
            seed=cfg.output.seed,
            deterministic=cfg.output.deterministic,
            store=_logit_store(cfg, data, part, assignment, run_dir),
            eval_every=cfg.output.eval_every,
            checkpoint_every=cfg.output.checkpoint_every,
            fine_tune_all=cfg.schedule.fine_tune_all,
            stop_after_epoch=stop_after_epoch,
        )
        report = run_stages(ctx, resume=resume)
        if assignment.digests() != digests:
            raise RuntimeError("teacher parameters changed during distillation")
        if render:
            render_report(ctx.log.records, report.matrix, run_dir / "report")
    return report


def load_student_checkpoint(path: Path, cfg: RunConfig, data: SplitDataset) -> torch.nn.Module:
    """Load ``final.ckpt`` (or a stage checkpoint) into the network the config describes."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    spec = student_spec(cfg, data)
    if ckpt.get("kind") == "student":
        model = Student(spec)
        state = ckpt["state_dict"]
    elif ckpt.get("kind") == "stage":
        model = assemble_stage_model(spec, build_schedule(cfg, spec), ckpt["stage"], seed=cfg.output.seed)
        state = ckpt["model"]
    else:
        raise ValueError(f"{path} is not a student checkpoint")
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise ValueError(f"shape mismatch between checkpoint {path} and config: {e}") from e
    model.eval()
    return model


def evaluate(cfg: RunConfig, checkpoint: Path, data: SplitDataset | None = None) -> dict:
    data = data or build_dataset(cfg)
    model = load_student_checkpoint(checkpoint, cfg, data)
    part = load_or_make_partition(cfg, data)
    out = {"all": top1_accuracy(model, data.test)}
    for t in range(1, part.num_subsets + 1):
        out[t] = top1_accuracy(model, subset_view(data.test, part, t, "test"))
    return out


def regenerate_report(run_dir: Path) -> list[Path]:
    records = read_metrics(Path(run_dir) / METRICS_FILE)
    return render_report(records, forgetting_matrix(records), Path(run_dir) / "report")
