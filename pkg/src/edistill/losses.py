"""Softened-KL distillation loss, the blended KD/CE objective, and its per-subset sum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Collection

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class DistillConfig:
    tau: float = 4.0
    alpha: float = 0.3
    kd_scale: str = "tau2"  # "tau2" or "1"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.kd_scale not in ("tau2", "1"):
            raise ValueError(f"kd_scale must be 'tau2' or '1', got {self.kd_scale!r}")

    @property
    def kd_multiplier(self) -> float:
        return self.tau**2 if self.kd_scale == "tau2" else 1.0


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


def softened_kl(student_logits: torch.Tensor, teacher_logits: torch.Tensor, tau: float) -> torch.Tensor:
    """KL(softmax(G/tau) || softmax(Z/tau)) per row, teacher distribution as target.

    Accepts a single row or a batch; returns a scalar or one value per row.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"shape mismatch: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    _check_finite("student logits", student_logits)
    _check_finite("teacher logits", teacher_logits)
    log_q = F.log_softmax(student_logits / tau, dim=-1)
    log_p = F.log_softmax(teacher_logits / tau, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1)


def combined_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    labels: torch.Tensor,
    config: DistillConfig,
    subset_ids: torch.Tensor | None = None,
) -> torch.Tensor:
    """alpha * kd_scale * mean KL + (1 - alpha) * mean cross-entropy over one subset's rows."""
    if student_logits.shape[0] == 0:
        raise ValueError("empty batch")
    if subset_ids is not None and len(torch.unique(subset_ids)) > 1:
        raise ValueError("combined_loss expects rows from a single subset")
    a = config.alpha
    kd = softened_kl(student_logits, teacher_logits, config.tau).mean()
    ce = F.cross_entropy(student_logits, labels)
    if a == 0.0:
        return ce
    if a == 1.0:
        return config.kd_multiplier * kd
    return a * config.kd_multiplier * kd + (1.0 - a) * ce


@dataclass
class EDLoss:
    total: torch.Tensor
    per_subset: dict[int, torch.Tensor] = field(default_factory=dict)
    weights: dict[int, float] = field(default_factory=dict)


def ed_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    labels: torch.Tensor,
    subset_ids: torch.Tensor,
    config: DistillConfig,
    teachers: Collection[int] | None = None,
) -> EDLoss:
    """Sum of per-subset combined losses, each weighted by its row fraction.

    ``teacher_logits`` must already be routed (row i from the teacher of
    ``subset_ids[i]``). Subsets absent from the batch contribute nothing.
    """
    n = len(subset_ids)
    if n == 0:
        raise ValueError("empty batch")
    present = sorted(int(s) for s in torch.unique(subset_ids))
    if teachers is not None:
        missing = [s for s in present if s not in teachers]
        if missing:
            raise KeyError(f"no teacher registered for subsets {missing}")
    out = EDLoss(total=student_logits.new_zeros(()))
    for s in present:
        rows = subset_ids == s
        loss = combined_loss(student_logits[rows], teacher_logits[rows], labels[rows], config)
        w = int(rows.sum()) / n
        out.per_subset[s] = loss
        out.weights[s] = w
        out.total = out.total + w * loss
    return out


def gradient_check(loss_fn: Callable[[torch.Tensor], torch.Tensor], logits: torch.Tensor, eps: float = 1e-4) -> float:
    """Max elementwise relative error between autograd and central differences.

    Runs in float64. Entries where both gradients are below 1e-12 count as exact.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    z = logits.detach().to(torch.float64).clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(loss_fn(z), z)
    numeric = torch.zeros_like(z)
    flat = z.detach().clone().view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss_fn(flat.view_as(z)).item()
            flat[i] = orig - eps
            down = loss_fn(flat.view_as(z)).item()
            flat[i] = orig
            numeric.view(-1)[i] = (up - down) / (2 * eps)
    scale = torch.maximum(analytic.abs(), numeric.abs())
    err = (analytic - numeric).abs()
    rel = torch.where(scale < 1e-12, torch.zeros_like(err), err / scale.clamp_min(1e-12))
    return float(rel.max())
