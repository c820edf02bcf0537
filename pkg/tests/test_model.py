import pytest
import torch

from edistill.model import (
    BlockSpec,
    DecoderSpec,
    StemSpec,
    Student,
    StudentSpec,
    advance_stage,
    assemble_stage_model,
    builtin_spec,
    count_parameters,
    fingerprint,
    fingerprint_text,
    restore_final_architecture,
)
from edistill.schedule import StageSchedule


@pytest.fixture
def spec4():
    return builtin_spec("resnet_toy", num_classes=10)


@pytest.fixture
def sched4():
    return StageSchedule(3, (("layer1", "layer2"), ("layer3",), ("layer4",)), (2, 4), 6)


def test_final_stage_matches_direct_student(spec4, sched4):
    m = assemble_stage_model(spec4, sched4, 3)
    ref = Student(spec4)
    assert len(m.blocks) == 4
    assert m.is_final
    assert count_parameters(m) == count_parameters(ref)
    assert fingerprint(m) == fingerprint(ref)


def test_stage_one_forward_shape(spec4, sched4):
    m = assemble_stage_model(spec4, sched4, 1)
    assert m.block_ids == ["layer1", "layer2"]
    assert not m.is_final
    out = m(torch.randn(5, 3, 16, 16))
    assert out.shape == (5, 10)


@pytest.mark.parametrize("size", [8, 16, 21])
@pytest.mark.parametrize("t", [1, 2, 3])
def test_logit_width_any_input_size(spec4, sched4, t, size):
    m = assemble_stage_model(spec4, sched4, t)
    assert m(torch.randn(2, 3, size, size)).shape == (2, 10)


def test_advance_keeps_prefix_values(spec4, sched4):
    m1 = assemble_stage_model(spec4, sched4, 1, seed=3)
    m2 = advance_stage(m1, spec4, sched4, seed=3)
    s1, s2 = m1.state_dict(), m2.state_dict()
    prefix = [k for k in s1 if k.startswith(("stem.", "blocks.0.", "blocks.1."))]
    assert prefix
    for k in prefix:
        assert torch.equal(s1[k], s2[k]), k
    # carried modules are copies, the stage-1 model stays usable on its own
    assert m1.stem[0].weight.data_ptr() != m2.stem[0].weight.data_ptr()


def test_advance_matches_direct_assembly(spec4, sched4):
    m2 = advance_stage(assemble_stage_model(spec4, sched4, 1, seed=5), spec4, sched4, seed=5)
    direct = assemble_stage_model(spec4, sched4, 2, seed=5)
    s, d = m2.state_dict(), direct.state_dict()
    assert s.keys() == d.keys()
    for k in s:
        assert torch.equal(s[k], d[k]), k


def test_advance_drops_old_adapter(spec4, sched4):
    m1 = assemble_stage_model(spec4, sched4, 1)
    old = {id(p) for p in m1.head.adapter.parameters()}
    m2 = advance_stage(m1, spec4, sched4)
    assert old.isdisjoint(id(p) for p in m2.parameters())
    # new adapter reads block-3 channels
    assert m2.head.adapter.in_channels == spec4.blocks[2].channels
    assert m2.head.adapter.out_channels == spec4.feature_channels


def test_frozen_sets_grow(spec4, sched4):
    m1 = assemble_stage_model(spec4, sched4, 1)
    m2 = advance_stage(m1, spec4, sched4)
    m3 = advance_stage(m2, spec4, sched4)
    assert m1.frozen_param_ids == frozenset()
    assert m1.frozen_param_ids <= m2.frozen_param_ids <= m3.frozen_param_ids
    assert any(k.startswith("blocks.1.") for k in m2.frozen_param_ids)
    assert not any(k.startswith("blocks.2.") for k in m2.frozen_param_ids)
    assert any(k.startswith("blocks.2.") for k in m3.frozen_param_ids)
    # the shared classifier keeps training
    assert not any("classifier" in k for k in m3.frozen_param_ids)


def test_optimizer_step_leaves_frozen_params_bitwise(spec4, sched4):
    m2 = advance_stage(assemble_stage_model(spec4, sched4, 1), spec4, sched4)
    before = {k: v.clone() for k, v in m2.state_dict().items()}
    opt = torch.optim.SGD(m2.trainable_parameters(), lr=0.5, momentum=0.9, weight_decay=1e-2)
    m2.train()
    loss = m2(torch.randn(8, 3, 16, 16)).logsumexp(1).mean()
    loss.backward()
    opt.step()
    after = m2.state_dict()
    for k in m2.frozen_param_ids:
        assert (after[k] - before[k]).abs().max() == 0, k
    # frozen batch-norm statistics too
    for k in before:
        if k.startswith(("stem.", "blocks.0.", "blocks.1.")) and "running" in k:
            assert torch.equal(after[k], before[k]), k
    assert any(not torch.equal(after[k], before[k]) for k in after if k.startswith("blocks.2."))


def test_frozen_modules_stay_in_eval(spec4, sched4):
    m2 = advance_stage(assemble_stage_model(spec4, sched4, 1), spec4, sched4)
    m2.train()
    assert not m2.stem.training
    assert not m2.blocks[0].training and not m2.blocks[1].training
    assert m2.blocks[2].training and m2.head.training


@pytest.mark.parametrize("name", ["resnet_toy", "vgg_toy", "mobile_toy", "cnn3_toy", "resnet20"])
def test_restoration_fingerprint(name):
    spec = builtin_spec(name, num_classes=7)
    sched = StageSchedule.even(spec.block_ids, 3, (1, 2), 3)
    m = assemble_stage_model(spec, sched, 1)
    m = advance_stage(m, spec, sched)
    m = restore_final_architecture(m, spec, sched)
    ref = Student(spec)
    assert fingerprint(m) == fingerprint(ref)
    assert count_parameters(m) == count_parameters(ref)
    assert m.state_dict().keys() == ref.state_dict().keys()
    x = torch.randn(3, 3, 16, 16)
    assert m(x).shape == ref.eval()(x).shape == (3, 7)


def test_fingerprint_text_lines():
    spec = builtin_spec("cnn3_toy", 4)
    text = fingerprint_text(Student(spec))
    lines = text.splitlines()
    assert lines[0] == "Conv2d 16x3x3x3"
    assert "AdaptiveAvgPool2d 1x1" in lines
    assert lines[-1] == "Linear 4x64,4"


def test_stage_out_of_range(spec4, sched4):
    with pytest.raises(ValueError, match="out of range"):
        assemble_stage_model(spec4, sched4, 4)
    with pytest.raises(ValueError, match="out of range"):
        assemble_stage_model(spec4, sched4, 0)


def test_unassigned_block_rejected(spec4):
    sched = StageSchedule(3, (("layer1",), ("layer3",), ("layer4",)), (2, 4), 6)
    with pytest.raises(ValueError, match="unassigned"):
        assemble_stage_model(spec4, sched, 1)


def test_cannot_advance_final(spec4, sched4):
    m = assemble_stage_model(spec4, sched4, 3)
    with pytest.raises(ValueError, match="final stage"):
        advance_stage(m, spec4, sched4)


def test_restore_requires_penultimate_stage(spec4, sched4):
    with pytest.raises(ValueError, match="restoration"):
        restore_final_architecture(assemble_stage_model(spec4, sched4, 1), spec4, sched4)


def test_advance_rejects_unfrozen_prior_stage(spec4, sched4):
    m2 = advance_stage(assemble_stage_model(spec4, sched4, 1), spec4, sched4)
    m2.stem[0].weight.requires_grad_(True)
    with pytest.raises(RuntimeError, match="unfrozen"):
        advance_stage(m2, spec4, sched4)


def test_decoder_channel_mismatch():
    spec = StudentSpec(3, StemSpec(8), (BlockSpec("a", "vgg", 8), BlockSpec("b", "vgg", 16)), 5, DecoderSpec(in_channels=12))
    sched = StageSchedule(2, (("a",), ("b",)), (1,), 2)
    with pytest.raises(ValueError, match="decoder expects 12"):
        assemble_stage_model(spec, sched, 2)


def test_spec_invariants():
    with pytest.raises(ValueError, match="unique"):
        StudentSpec(3, StemSpec(8), (BlockSpec("a", "vgg", 8), BlockSpec("a", "vgg", 8)), 5)
    with pytest.raises(ValueError, match="positive"):
        StudentSpec(3, StemSpec(8), (BlockSpec("a", "vgg", 0),), 5)


def test_spec_dict_round_trip():
    spec = builtin_spec("vgg_toy", 9)
    assert StudentSpec.from_dict(spec.to_dict()) == spec


def test_fine_tune_all_unfreezes_final_stage(spec4, sched4):
    m = assemble_stage_model(spec4, sched4, 2)
    m3 = advance_stage(m, spec4, sched4, fine_tune_all=True)
    assert m3.frozen_param_ids == frozenset()
    assert all(p.requires_grad for p in m3.parameters())
