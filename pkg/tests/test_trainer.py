import pytest
import torch

from edistill.data import synthetic_blobs
from edistill.losses import DistillConfig, combined_loss, ed_loss
from edistill.model import assemble_stage_model, builtin_spec
from edistill.partition import partition, subset_view
from edistill.report import MetricsLog
from edistill.schedule import OptimizerConfig, StageSchedule, lr_at
from edistill.teachers import TeacherAssignment, teacher_logits, train_teacher
from edistill.trainer import (
    RunContext,
    RunState,
    initial_state,
    maybe_advance,
    run_stages,
    should_advance,
    train_epoch,
)


def test_lr_at_reference_protocol():
    cfg = OptimizerConfig()
    assert lr_at(0, cfg) == 0.05
    assert lr_at(149, cfg) == 0.05
    assert lr_at(150, cfg) == pytest.approx(0.005, rel=1e-12)
    assert lr_at(239, cfg) == pytest.approx(0.05 * 0.1**3, rel=1e-12)
    assert lr_at(239, cfg) == pytest.approx(0.00005, rel=1e-12)


@pytest.mark.parametrize(
    "kwargs, match",
    [
        (dict(advance_epochs=(80, 50)), "increasing"),
        (dict(advance_epochs=(50, 240)), "total_epochs"),
        (dict(advance_epochs=(50,)), "need 2"),
        (dict(block_allocation=(("a",), ("a",), ("c",))), "disjoint"),
        (dict(block_allocation=(("a",), (), ("c",))), "at least one"),
        (dict(advance_mode="sometimes"), "advance_mode"),
    ],
)
def test_schedule_validation(kwargs, match):
    base = dict(num_stages=3, block_allocation=(("a",), ("b",), ("c",)), advance_epochs=(50, 80), total_epochs=240)
    base.update(kwargs)
    with pytest.raises(ValueError, match=match):
        StageSchedule(**base)


def test_stage_at_is_monotone_step():
    s = StageSchedule(3, (("a",), ("b",), ("c",)), (50, 80), 240)
    stages = [s.stage_at(e) for e in range(240)]
    assert stages == sorted(stages)
    assert set(stages) == {1, 2, 3}
    assert s.stage_at(49) == 1 and s.stage_at(50) == 2 and s.stage_at(80) == 3


def test_even_allocation():
    s = StageSchedule.even(["l1", "l2", "l3", "l4"], 3, (2, 4), 6)
    assert s.block_allocation == (("l1", "l2"), ("l3",), ("l4",))


class _Dummy:
    def __init__(self, stage, epoch, history=()):
        self.stage, self.epoch, self.history = stage, epoch, list(history)


def test_fixed_advance_epochs():
    s = StageSchedule(3, (("a",), ("b",), ("c",)), (50, 80), 240)
    assert not should_advance(_Dummy(1, 49), s)
    assert should_advance(_Dummy(1, 50), s)
    assert not should_advance(_Dummy(2, 79), s)
    assert should_advance(_Dummy(2, 80), s)
    assert not should_advance(_Dummy(3, 239), s)


def simulate_plateau(accs, schedule):
    """Epoch at which stage 1 would advance for a given accuracy sequence."""
    for e in range(schedule.total_epochs):
        if should_advance(_Dummy(1, e, accs[:e]), schedule):
            return e
    return None


def test_plateau_monotone_improvement_hits_ceiling():
    s = StageSchedule(3, (("a",), ("b",), ("c",)), (50, 80), 240, advance_mode="plateau", plateau_delta=0.1, plateau_patience=10)
    accs = [10 + 1.0 * e for e in range(240)]
    assert simulate_plateau(accs, s) == 50


def test_plateau_flat_accuracy_advances_early():
    s = StageSchedule(3, (("a",), ("b",), ("c",)), (50, 80), 240, advance_mode="plateau", plateau_delta=0.1, plateau_patience=10)
    accs = [min(5.0 * e, 60.0) for e in range(240)]  # saturates at epoch 12
    e = simulate_plateau(accs, s)
    assert 12 < e < 50
    # exactly patience epochs without a 0.1-point gain after the peak
    assert e == 13 + 10


# ---------------------------------------------------------------------------
# training loop


@pytest.fixture(scope="module")
def setup():
    data = synthetic_blobs(num_classes=6, train_per_class=10, test_per_class=5, noise=0.7, seed=1)
    spec = builtin_spec("cnn3_toy", 6)
    sched = StageSchedule.even(spec.block_ids, 3, (2, 4), 6)
    part = partition(data.train.labels, 3, seed=0)
    opt = OptimizerConfig(batch_size=8, init_lr=0.01, lr_milestones=(5,))
    teachers = {}
    for t in (1, 2, 3):
        x, y = subset_view(data.train, part, t).tensors()
        teachers[t], _ = train_teacher(builtin_spec("cnn3_toy", 6), x, y, opt, 2, seed=t)
    return data, spec, sched, part, opt, TeacherAssignment(teachers)


def make_ctx(setup, **kw):
    data, spec, sched, part, opt, teachers = setup
    return RunContext(spec, sched, opt, DistillConfig(), data, part, teachers, MetricsLog(), **kw)


def test_stage_two_step_keeps_frozen(setup):
    ctx = make_ctx(setup)
    state = initial_state(ctx)
    state.epoch = 2
    state = maybe_advance(state, ctx)
    assert state.stage == 2
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    train_epoch(state, ctx)
    after = state.model.state_dict()
    for k in state.model.frozen_param_ids:
        assert torch.equal(before[k], after[k]), k
    assert any(not torch.equal(before[k], after[k]) for k in after if k.startswith("blocks.1."))


def test_optimizer_tracks_only_unfrozen(setup):
    ctx = make_ctx(setup)
    state = initial_state(ctx)
    for e in (2, 4):
        state.epoch = e
        state = maybe_advance(state, ctx)
        state.check_optimizer()
        tracked = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
        frozen = {id(p) for n, p in state.model.named_parameters() if n in state.model.frozen_param_ids}
        assert tracked.isdisjoint(frozen)
        assert not state.optimizer.state  # momentum reset


def test_stage_one_batch_loss_is_combined_loss(setup):
    data, spec, sched, part, opt, teachers = setup
    model = assemble_stage_model(spec, sched, 1)
    x, y = subset_view(data.train, part, 1).tensors()
    sids = torch.ones(len(y), dtype=torch.long)
    g = teacher_logits(teachers, x, sids)
    z = model(x)
    assert ed_loss(z, g, y, sids, DistillConfig()).total.item() == pytest.approx(
        combined_loss(z, g, y, DistillConfig()).item(), abs=1e-6
    )


def test_run_events_and_determinism(setup):
    a = run_stages(make_ctx(setup))
    b = run_stages(make_ctx(setup))
    assert [(e, m) for e, m, _ in a.timeline] == [(2, "advance"), (4, "advance"), (4, "restore")]
    assert a.final_top1 == b.final_top1
    sa = a.model.state_dict()
    sb = b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_metrics_triangle(setup):
    ctx = make_ctx(setup)
    run_stages(ctx)
    recs = [r for r in ctx.log.records if r.split == "test" and r.metric == "top1"]
    epochs = sorted({r.epoch for r in recs})
    assert epochs == list(range(6))
    for e in epochs:
        stage = 1 + sum(1 for a in (2, 4) if a <= e)
        subsets = {r.subset_id for r in recs if r.epoch == e}
        assert subsets == {"all"} | {str(t) for t in range(1, stage + 1)}


def test_loss_trace_identical_across_runs(setup):
    c1, c2 = make_ctx(setup), make_ctx(setup)
    run_stages(c1)
    run_stages(c2)
    assert [r.to_line() for r in c1.log.records] == [r.to_line() for r in c2.log.records]


def test_nan_loss_aborts_with_checkpoint(setup, tmp_path):
    data, spec, sched, part, opt, teachers = setup
    bad = OptimizerConfig(batch_size=8, init_lr=1e30, lr_milestones=())
    ctx = RunContext(spec, sched, bad, DistillConfig(), data, part, teachers, MetricsLog(), run_dir=tmp_path)
    with pytest.raises(Exception, match="non-finite|stage"):
        run_stages(ctx)
    assert list(tmp_path.glob("nan_stage*.ckpt"))


def test_missing_teacher_fails(setup):
    data, spec, sched, part, opt, teachers = setup
    partial = TeacherAssignment({1: teachers.teachers[1]})
    ctx = RunContext(spec, sched, opt, DistillConfig(), data, part, partial, MetricsLog())
    with pytest.raises(Exception, match="no teacher"):
        run_stages(ctx)
