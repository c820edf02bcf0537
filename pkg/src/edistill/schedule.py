"""Stage timetable, optimizer settings and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class StageSchedule:
    num_stages: int
    block_allocation: tuple[tuple[str, ...], ...]
    advance_epochs: tuple[int, ...]
    total_epochs: int
    advance_mode: str = "fixed"  # "fixed" or "plateau"
    plateau_delta: float = 0.1
    plateau_patience: int = 10

    def __post_init__(self):
        T = self.num_stages
        if T < 1:
            raise ValueError(f"num_stages must be positive, got {T}")
        if len(self.block_allocation) != T:
            raise ValueError(f"block_allocation has {len(self.block_allocation)} entries for {T} stages")
        if any(len(ids) == 0 for ids in self.block_allocation):
            raise ValueError("every stage must own at least one block")
        flat = [b for ids in self.block_allocation for b in ids]
        if len(set(flat)) != len(flat):
            raise ValueError("block_allocation sets must be disjoint")
        if len(self.advance_epochs) != T - 1:
            raise ValueError(f"need {T - 1} advance epochs for {T} stages, got {len(self.advance_epochs)}")
        epochs = list(self.advance_epochs)
        if any(b <= a for a, b in zip(epochs, epochs[1:])) or any(e <= 0 for e in epochs):
            raise ValueError(f"advance_epochs must be positive and strictly increasing, got {epochs}")
        if epochs and epochs[-1] >= self.total_epochs:
            raise ValueError(f"advance epoch {epochs[-1]} is not below total_epochs={self.total_epochs}")
        if self.advance_mode not in ("fixed", "plateau"):
            raise ValueError(f"advance_mode must be 'fixed' or 'plateau', got {self.advance_mode!r}")

    def check_blocks(self, block_ids: list[str]) -> None:
        flat = [b for ids in self.block_allocation for b in ids]
        if sorted(flat) != sorted(block_ids):
            raise ValueError(f"block_allocation {flat} must cover exactly the student blocks {block_ids}")

    def stage_at(self, epoch: int) -> int:
        """Stage active during ``epoch`` under the fixed-epoch timetable."""
        return 1 + sum(1 for e in self.advance_epochs if e <= epoch)

    @classmethod
    def even(cls, block_ids: list[str], num_stages: int, advance_epochs, total_epochs: int, **kw) -> "StageSchedule":
        """Stage 1 gets the leading blocks; the remaining stages take one block each
        from the end, which matches the usual main-body-plus-blocks split."""
        n = len(block_ids)
        if num_stages > n:
            raise ValueError(f"{num_stages} stages need at least as many blocks, have {n}")
        head = n - (num_stages - 1)
        alloc = [tuple(block_ids[:head])] + [(b,) for b in block_ids[head:]]
        return cls(num_stages, tuple(alloc), tuple(advance_epochs), total_epochs, **kw)


@dataclass(frozen=True)
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    init_lr: float = 0.05
    lr_milestones: tuple[int, ...] = (150, 180, 210)
    lr_gamma: float = 0.1

    def __post_init__(self):
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if self.batch_size < 1 or self.init_lr <= 0 or self.lr_gamma <= 0:
            raise ValueError("batch_size, init_lr and lr_gamma must be positive")
        if any(m <= 0 for m in self.lr_milestones):
            raise ValueError("lr milestones must be positive")


def lr_at(epoch: int, config: OptimizerConfig) -> float:
    decays = sum(1 for m in config.lr_milestones if m <= epoch)
    return config.init_lr * config.lr_gamma**decays


def make_optimizer(params, config: OptimizerConfig, lr: float | None = None) -> torch.optim.SGD:
    return torch.optim.SGD(
        params,
        lr=config.init_lr if lr is None else lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
