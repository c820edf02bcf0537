"""Staged knowledge distillation with teaching-reference heads."""

from edistill.losses import DistillConfig, combined_loss, ed_loss, softened_kl
from edistill.model import (
    StageModel,
    Student,
    StudentSpec,
    advance_stage,
    assemble_stage_model,
    builtin_spec,
    fingerprint,
    restore_final_architecture,
)
from edistill.partition import SubDatasetPartition, active_union, partition, subset_view
from edistill.schedule import OptimizerConfig, StageSchedule, lr_at

__all__ = [
    "DistillConfig",
    "OptimizerConfig",
    "StageModel",
    "StageSchedule",
    "Student",
    "StudentSpec",
    "SubDatasetPartition",
    "active_union",
    "advance_stage",
    "assemble_stage_model",
    "builtin_spec",
    "combined_loss",
    "ed_loss",
    "fingerprint",
    "lr_at",
    "partition",
    "restore_final_architecture",
    "softened_kl",
    "subset_view",
]
