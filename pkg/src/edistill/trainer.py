"""Staged distillation loop: stage advances, freezing, evaluation and checkpoints."""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from edistill.data import SplitDataset
from edistill.losses import DistillConfig, ed_loss
from edistill.model import StageModel, StudentSpec, advance_stage, assemble_stage_model
from edistill.partition import SubDatasetPartition, active_union, subset_view
from edistill.report import ForgettingMatrix, MetricsLog, MetricsRecord, forgetting_matrix, top1_accuracy
from edistill.schedule import OptimizerConfig, StageSchedule, lr_at, make_optimizer, set_lr
from edistill.teachers import LogitStore, TeacherAssignment, teacher_logits

log = logging.getLogger(__name__)

CKPT_RE = re.compile(r"stage(\d+)_epoch(\d+)\.ckpt$")


class Interrupted(RuntimeError):
    """Raised when a run is stopped on purpose after a given epoch."""


class StageError(RuntimeError):
    """A failure inside the training loop, annotated with stage and epoch."""


@dataclass
class RunContext:
    spec: StudentSpec
    schedule: StageSchedule
    optim: OptimizerConfig
    distill: DistillConfig
    data: SplitDataset
    partition: SubDatasetPartition
    teachers: TeacherAssignment
    log: MetricsLog
    run_id: str = "run"
    run_dir: Path | None = None
    seed: int = 0
    deterministic: bool = True
    store: LogitStore | None = None
    eval_every: int = 1
    checkpoint_every: int = 1
    fine_tune_all: bool = False
    stop_after_epoch: int | None = None
    _t0: float = field(default_factory=time.time)


@dataclass
class RunState:
    epoch: int  # next epoch to run
    stage: int
    model: StageModel
    optimizer: torch.optim.Optimizer
    history: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def check_optimizer(self) -> None:
        tracked = {id(p) for g in self.optimizer.param_groups for p in g["params"]}
        trainable = {id(p) for p in self.model.trainable_parameters()}
        if tracked != trainable:
            raise RuntimeError("optimizer parameters differ from the model's unfrozen set")


def seed_everything(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def _record(ctx: RunContext, epoch: int, stage: int, split: str, subset, metric: str, value: float) -> None:
    wall = 0.0 if ctx.deterministic else time.time() - ctx._t0
    ctx.log.append(MetricsRecord(ctx.run_id, epoch, stage, split, str(subset), metric, float(value), wall))


def _fresh_optimizer(model: StageModel, ctx: RunContext, epoch: int) -> torch.optim.Optimizer:
    return make_optimizer(model.trainable_parameters(), ctx.optim, lr_at(epoch, ctx.optim))


def initial_state(ctx: RunContext) -> RunState:
    model = assemble_stage_model(ctx.spec, ctx.schedule, 1, seed=ctx.seed)
    return RunState(0, 1, model, _fresh_optimizer(model, ctx, 0))


def _next_ceiling(state: RunState, schedule: StageSchedule) -> int | None:
    if state.stage >= schedule.num_stages:
        return None
    return schedule.advance_epochs[state.stage - 1]


def should_advance(state: RunState, schedule: StageSchedule) -> bool:
    ceiling = _next_ceiling(state, schedule)
    if ceiling is None:
        return False
    if state.epoch >= ceiling:
        return True
    if schedule.advance_mode == "plateau":
        k = schedule.plateau_patience
        h = state.history
        if len(h) > k and max(h[-k:]) - max(h[:-k]) < schedule.plateau_delta:
            return True
    return False


def maybe_advance(state: RunState, ctx: RunContext) -> RunState:
    """Advance to the next stage when the timetable (or a plateau) says so.

    The optimizer is rebuilt over the new unfrozen set, which resets momentum.
    """
    if not should_advance(state, ctx.schedule):
        return state
    model = advance_stage(state.model, ctx.spec, ctx.schedule, seed=ctx.seed, fine_tune_all=ctx.fine_tune_all)
    new = RunState(state.epoch, model.stage, model, _fresh_optimizer(model, ctx, state.epoch), [], state.checkpoints)
    _record(ctx, state.epoch, new.stage, "train", "all", "advance", new.stage)
    if model.is_final:
        _record(ctx, state.epoch, new.stage, "train", "all", "restore", new.stage)
    log.info("epoch %d: advanced to stage %d", state.epoch, new.stage)
    return new


def _teacher_batch(ctx: RunContext, idx: np.ndarray, sids: np.ndarray, x: torch.Tensor) -> torch.Tensor:
    if ctx.store is not None:
        return ctx.store.get(idx)
    return teacher_logits(ctx.teachers, x, torch.as_tensor(sids))


def train_epoch(state: RunState, ctx: RunContext) -> dict:
    """One pass over the active union; returns summed losses for logging."""
    epoch = state.epoch
    set_lr(state.optimizer, lr_at(epoch, ctx.optim))
    union = active_union(ctx.data.train, ctx.partition, state.stage)
    gen = torch.Generator().manual_seed(ctx.seed * 100_003 + epoch)
    model = state.model
    model.train()
    registered = set(ctx.teachers.teachers)
    sums = {"all": 0.0}
    counts = {"all": 0}
    for idx, sids in union.batches(ctx.optim.batch_size, gen):
        if len(idx) < 2:
            continue
        ti = torch.as_tensor(idx)
        x, y = ctx.data.train.x[ti], ctx.data.train.y[ti]
        sid_t = torch.as_tensor(sids)
        g = _teacher_batch(ctx, idx, sids, x)
        z = model(x)
        loss = ed_loss(z, g, y, sid_t, ctx.distill, teachers=registered) if torch.isfinite(z).all() else None
        if loss is None or not torch.isfinite(loss.total):
            path = None
            if ctx.run_dir is not None:
                path = ctx.run_dir / f"nan_stage{state.stage}_epoch{epoch}.ckpt"
                _save_state(path, state, ctx)
            raise FloatingPointError(f"non-finite loss at stage {state.stage}, epoch {epoch}; diagnostic checkpoint: {path}")
        state.optimizer.zero_grad()
        loss.total.backward()
        state.optimizer.step()
        n = len(idx)
        sums["all"] += float(loss.total.detach()) * n
        counts["all"] += n
        for s, l in loss.per_subset.items():
            k = int((sid_t == s).sum())
            sums[s] = sums.get(s, 0.0) + float(l.detach()) * k
            counts[s] = counts.get(s, 0) + k
    return {k: sums[k] / counts[k] for k in sums if counts[k]}


def evaluate_subsets(model: StageModel, data: SplitDataset, part: SubDatasetPartition, upto: int) -> dict:
    """Test top-1 on the full test set and on every subset up to ``upto``."""
    out = {"all": top1_accuracy(model, data.test)}
    for t in range(1, upto + 1):
        view = subset_view(data.test, part, t, "test")
        out[t] = top1_accuracy(model, view)
    return out


def _is_stage_end(epoch: int, schedule: StageSchedule) -> bool:
    return epoch + 1 in schedule.advance_epochs or epoch == schedule.total_epochs - 1


def train_stage(state: RunState, ctx: RunContext) -> RunState:
    """Run epochs of the current stage until an advance is due or the run ends."""
    schedule = ctx.schedule
    stage = state.stage
    while state.epoch < schedule.total_epochs:
        state = maybe_advance(state, ctx)
        if state.stage != stage:
            return state
        epoch = state.epoch
        state.check_optimizer()
        losses = train_epoch(state, ctx)
        _record(ctx, epoch, stage, "train", "all", "lr", lr_at(epoch, ctx.optim))
        for k, v in losses.items():
            _record(ctx, epoch, stage, "train", k, "loss", v)
        plateau = schedule.advance_mode == "plateau" and stage < schedule.num_stages
        if plateau or _is_stage_end(epoch, schedule) or (epoch + 1) % ctx.eval_every == 0:
            accs = evaluate_subsets(state.model, ctx.data, ctx.partition, stage)
            for k, v in accs.items():
                _record(ctx, epoch, stage, "test", k, "top1", v)
            sizes = [len(subset_view(ctx.data.test, ctx.partition, t, "test")) for t in range(1, stage + 1)]
            state.history.append(sum(accs[t] * n for t, n in zip(range(1, stage + 1), sizes)) / max(sum(sizes), 1))
        state.epoch += 1
        if ctx.run_dir is not None and (state.epoch % ctx.checkpoint_every == 0 or _is_stage_end(epoch, schedule)):
            path = ctx.run_dir / f"stage{stage}_epoch{epoch}.ckpt"
            _save_state(path, state, ctx)
            state.checkpoints.append(path)
        if ctx.stop_after_epoch is not None and epoch >= ctx.stop_after_epoch:
            raise Interrupted(f"stopped after epoch {epoch}")
    return state


# ---------------------------------------------------------------------------
# Checkpoints


def _save_state(path: Path, state: RunState, ctx: RunContext) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save(
        {
            "kind": "stage",
            "spec": ctx.spec.to_dict(),
            "stage": state.stage,
            "epoch": state.epoch,
            "model": state.model.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "history": list(state.history),
            "log_len": len(ctx.log),
            "seed": ctx.seed,
        },
        tmp,
    )
    tmp.replace(path)


def newest_checkpoint(run_dir: Path) -> Path | None:
    best = None
    for p in Path(run_dir).glob("stage*_epoch*.ckpt"):
        m = CKPT_RE.search(p.name)
        if m and (best is None or int(m.group(2)) > best[0]):
            best = (int(m.group(2)), p)
    return best[1] if best else None


def resume_state(path: Path, ctx: RunContext) -> RunState:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    model = assemble_stage_model(ctx.spec, ctx.schedule, ckpt["stage"], seed=ctx.seed)
    model.load_state_dict(ckpt["model"])
    opt = _fresh_optimizer(model, ctx, ckpt["epoch"])
    opt.load_state_dict(ckpt["optimizer"])
    if len(ctx.log) > ckpt["log_len"]:
        ctx.log.truncate(ckpt["log_len"])
    return RunState(ckpt["epoch"], ckpt["stage"], model, opt, list(ckpt["history"]), [path])


def save_final(path: Path, model: StageModel) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": "student", "spec": model.spec.to_dict(), "state_dict": model.state_dict()}, path)


# ---------------------------------------------------------------------------
# Whole run


@dataclass
class RunReport:
    run_id: str
    final_top1: float
    per_subset: dict[int, float]
    timeline: list[tuple[int, str, int]]  # (epoch, event, stage)
    matrix: ForgettingMatrix
    final_checkpoint: Path | None = None
    model: StageModel | None = None


def run_stages(ctx: RunContext, resume: bool = False) -> RunReport:
    """Execute stages 1..T with advances between them and write ``final.ckpt``."""
    seed_everything(ctx.seed, ctx.deterministic)
    state = None
    if resume and ctx.run_dir is not None:
        ckpt = newest_checkpoint(ctx.run_dir)
        if ckpt is not None:
            state = resume_state(ckpt, ctx)
            log.info("resumed from %s at epoch %d", ckpt, state.epoch)
    if state is None:
        if len(ctx.log):
            ctx.log.truncate(0)
        state = initial_state(ctx)
    while state.epoch < ctx.schedule.total_epochs:
        try:
            state = train_stage(state, ctx)
        except Interrupted:
            raise
        except Exception as e:
            raise StageError(f"stage {state.stage}, epoch {state.epoch}: {type(e).__name__}: {e}") from e
    if state.stage != ctx.schedule.num_stages:
        raise RuntimeError(f"run ended at stage {state.stage} of {ctx.schedule.num_stages}")
    final = None
    if ctx.run_dir is not None:
        final = ctx.run_dir / "final.ckpt"
        save_final(final, state.model)
    records = ctx.log.records
    last = max(r.epoch for r in records if r.split == "test" and r.metric == "top1")
    accs = {r.subset_id: r.value for r in records if r.epoch == last and r.split == "test" and r.metric == "top1"}
    timeline = [(r.epoch, r.metric, r.stage) for r in records if r.metric in ("advance", "restore")]
    return RunReport(
        ctx.run_id,
        accs["all"],
        {int(k): v for k, v in accs.items() if k != "all"},
        timeline,
        forgetting_matrix(records),
        final,
        state.model,
    )
