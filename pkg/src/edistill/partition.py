"""Disjoint sub-dataset partitions and per-stage data views."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np
import torch

from edistill.data import ArrayDataset

MODES = ("class", "sample")


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Split ``n`` items proportionally to ``ratios``.

    Floors the exact quotas, then hands the leftover units to the largest
    fractional remainders; ties go to the lower group index.
    """
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {list(ratios)}")
    weights = [Fraction(r) for r in ratios]
    total = sum(weights)
    quotas = [n * w / total for w in weights]
    sizes = [int(q) for q in quotas]  # floor, quotas are non-negative
    leftover = n - sum(sizes)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


@dataclass(frozen=True)
class SubDatasetPartition:
    mode: str
    groups: tuple[tuple[int, ...], ...]
    ratios: tuple[float, ...]
    seed: int

    @property
    def num_subsets(self) -> int:
        return len(self.groups)

    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    def _check_index(self, t: int) -> None:
        if not 1 <= t <= self.num_subsets:
            raise IndexError(f"subset index {t} out of range 1..{self.num_subsets}")

    def groups_for(self, split: str, n: int) -> tuple[tuple[int, ...], ...]:
        """Groups over sample indices (sample mode) or class ids (class mode).

        Sample mode stores train indices; the test split is split the same way
        with a derived seed.
        """
        if self.mode == "class" or split == "train":
            return self.groups
        return _split_items(list(range(n)), self.ratios, self.seed + 1)

    def subset_ids(self, data: ArrayDataset, split: str = "train") -> np.ndarray:
        """Subset id (1-based) of every sample in ``data``; 0 for unassigned samples."""
        ids = np.zeros(len(data), dtype=np.int64)
        if self.mode == "class":
            lookup = {c: t for t, g in enumerate(self.groups, start=1) for c in g}
            labels = data.labels
            ids[:] = [lookup.get(int(c), 0) for c in labels]
        else:
            for t, g in enumerate(self.groups_for(split, len(data)), start=1):
                ids[list(g)] = t
        return ids

    def to_text(self) -> str:
        lines = [
            f"mode {self.mode}",
            f"seed {self.seed}",
            "ratios " + " ".join(repr(float(r)) for r in self.ratios),
        ]
        lines += ["group " + " ".join(str(i) for i in g) for g in self.groups]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SubDatasetPartition":
        fields: dict[str, str] = {}
        groups = []
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, rest = line.partition(" ")
            if key == "group":
                groups.append(tuple(int(i) for i in rest.split()))
            elif key in ("mode", "seed", "ratios"):
                fields[key] = rest
            else:
                raise ValueError(f"unexpected partition line: {line!r}")
        return cls(
            mode=fields["mode"].strip(),
            groups=tuple(groups),
            ratios=tuple(float(r) for r in fields["ratios"].split()),
            seed=int(fields["seed"]),
        )

    @classmethod
    def single(cls, labels: Sequence[int]) -> "SubDatasetPartition":
        """One group holding every class; used by the vanilla KD baseline."""
        return cls("class", (tuple(sorted({int(c) for c in labels})),), (1.0,), 0)


def _split_items(items: list[int], ratios: Sequence[float], seed: int) -> tuple[tuple[int, ...], ...]:
    sizes = largest_remainder(len(items), ratios)
    perm = np.random.default_rng(seed).permutation(len(items))
    shuffled = [items[i] for i in perm]
    out, start = [], 0
    for s in sizes:
        out.append(tuple(shuffled[start : start + s]))
        start += s
    return tuple(out)


def partition(labels: Sequence[int], T: int, ratios: Sequence[float] | None = None, mode: str = "class", seed: int = 0) -> SubDatasetPartition:
    """Split a labelled dataset into ``T`` disjoint sub-datasets.

    In class mode the groups hold class ids, in sample mode sample indices.
    """
    if T < 2:
        raise ValueError(f"need at least 2 subsets, got T={T}")
    ratios = tuple(float(r) for r in (ratios if ratios is not None else [1.0] * T))
    if len(ratios) != T:
        raise ValueError(f"got {len(ratios)} ratios for T={T}")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {list(ratios)}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    labels = np.asarray(labels)
    items = sorted({int(c) for c in labels}) if mode == "class" else list(range(len(labels)))
    if T > len(items):
        what = "classes" if mode == "class" else "samples"
        raise ValueError(f"T={T} exceeds the number of {what} ({len(items)})")
    groups = _split_items(items, ratios, seed)
    if any(len(g) == 0 for g in groups):
        raise ValueError(f"ratios {list(ratios)} leave an empty group for {len(items)} items")
    return SubDatasetPartition(mode, groups, ratios, seed)


class SubsetView:
    """Samples of one sub-dataset, labels kept in the global class space."""

    def __init__(self, data: ArrayDataset, indices: np.ndarray, subset_id: int):
        self.data = data
        self.indices = indices
        self.subset_id = subset_id

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[tuple[torch.Tensor, int, int]]:
        for i in self.indices:
            x, y = self.data[int(i)]
            yield x, y, self.subset_id

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(self.indices, dtype=torch.long)
        return self.data.x[idx], self.data.y[idx]


def subset_view(data: ArrayDataset, part: SubDatasetPartition, t: int, split: str = "train") -> SubsetView:
    part._check_index(t)
    ids = part.subset_ids(data, split)
    return SubsetView(data, np.flatnonzero(ids == t), t)


class ActiveUnion:
    """Union of sub-datasets 1..t with per-sample subset ids for teacher routing."""

    def __init__(self, data: ArrayDataset, indices: np.ndarray, subset_ids: np.ndarray, stage: int):
        self.data = data
        self.indices = indices
        self.subset_ids = subset_ids
        self.stage = stage

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        for i, s in zip(self.indices, self.subset_ids):
            x, y = self.data[int(i)]
            yield x, y, int(s)

    def batches(self, batch_size: int, generator: torch.Generator | None = None, shuffle: bool = True):
        """Yield ``(sample_indices, subset_ids)`` batches, uniform over samples."""
        n = len(self.indices)
        order = torch.randperm(n, generator=generator).numpy() if shuffle else np.arange(n)
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            yield self.indices[sel], self.subset_ids[sel]


def active_union(data: ArrayDataset, part: SubDatasetPartition, t: int, split: str = "train") -> ActiveUnion:
    part._check_index(t)
    ids = part.subset_ids(data, split)
    mask = (ids >= 1) & (ids <= t)
    idx = np.flatnonzero(mask)
    return ActiveUnion(data, idx, ids[idx], t)
