"""Per-subset teachers: training, routed inference and the cached logit store."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from edistill.data import ArrayDataset
from edistill.model import Student, StudentSpec
from edistill.partition import SubDatasetPartition
from edistill.schedule import OptimizerConfig, lr_at, make_optimizer, set_lr

TEACHER_MODES = ("per-subset", "shared")


def param_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def predict(model: nn.Module, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = torch.cat([model(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]) if len(x) else None
    model.train(was_training)
    return out


def train_teacher(
    spec: StudentSpec,
    x: torch.Tensor,
    y: torch.Tensor,
    opt: OptimizerConfig,
    epochs: int,
    seed: int = 0,
) -> tuple[Student, float]:
    """Plain cross-entropy training on one subset. Returns the model and its train accuracy (%)."""
    if len(y) == 0:
        raise ValueError("cannot train a teacher on an empty subset")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Student(spec)
    optimizer = make_optimizer(model.parameters(), opt)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        set_lr(optimizer, lr_at(epoch, opt))
        model.train()
        order = torch.randperm(len(y), generator=gen)
        for start in range(0, len(y), opt.batch_size):
            idx = order[start : start + opt.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            loss = F.cross_entropy(model(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"teacher loss diverged at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    acc = accuracy_of(model, x, y)
    model.eval()
    return model, acc


def accuracy_of(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    pred = predict(model, x).argmax(dim=1)
    return 100.0 * float((pred == y).sum()) / len(y)


def save_teacher(path: Path, model: Student, subset: int | None, accuracy: float) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"kind": "teacher", "spec": model.spec.to_dict(), "state_dict": model.state_dict(), "subset": subset, "accuracy": accuracy},
        path,
    )


def load_teacher(path: Path, num_classes: int | None = None) -> Student:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "teacher":
        raise ValueError(f"{path} is not a teacher checkpoint")
    spec = StudentSpec.from_dict(ckpt["spec"])
    if num_classes is not None and spec.num_classes != num_classes:
        raise ValueError(f"teacher {path} has {spec.num_classes} outputs, expected {num_classes}")
    model = Student(spec)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@dataclass
class TeacherAssignment:
    """Maps each stage/subset id to its teacher. Teachers are used read-only."""

    teachers: dict[int, nn.Module]
    mode: str = "per-subset"
    sources: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in TEACHER_MODES:
            raise ValueError(f"teacher mode must be one of {TEACHER_MODES}, got {self.mode!r}")
        for m in self.teachers.values():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    def validate(self, num_stages: int, num_classes: int) -> None:
        missing = [t for t in range(1, num_stages + 1) if t not in self.teachers]
        if missing:
            raise KeyError(f"no teacher for stages {missing}")
        for t, m in self.teachers.items():
            width = m.spec.num_classes if hasattr(m, "spec") else None
            if width is not None and width != num_classes:
                raise ValueError(f"teacher {t} emits {width} logits, expected {num_classes}")

    def digests(self) -> dict[int, str]:
        return {t: param_digest(m) for t, m in sorted(self.teachers.items())}

    @classmethod
    def shared(cls, model: nn.Module, num_stages: int, source: str = "") -> "TeacherAssignment":
        return cls({t: model for t in range(1, num_stages + 1)}, "shared", {t: source for t in range(1, num_stages + 1)})


@torch.no_grad()
def teacher_logits(assignment: TeacherAssignment, x: torch.Tensor, subset_ids) -> torch.Tensor:
    """Row i comes from the teacher of ``subset_ids[i]``, run in inference mode."""
    subset_ids = torch.as_tensor(subset_ids)
    present = [int(s) for s in torch.unique(subset_ids)]
    missing = [s for s in present if s not in assignment.teachers]
    if missing:
        raise KeyError(f"no teacher registered for subsets {missing}")
    out = None
    # one forward per distinct teacher module; shared mode runs once
    by_model: dict[int, list[int]] = {}
    for s in present:
        by_model.setdefault(id(assignment.teachers[s]), []).append(s)
    for sids in by_model.values():
        model = assignment.teachers[sids[0]]
        rows = torch.isin(subset_ids, torch.tensor(sids))
        g = predict(model, x[rows])
        if out is None:
            out = g.new_zeros((len(x), g.shape[1]))
        out[rows] = g
    return out


# ---------------------------------------------------------------------------
# Logit store
#
# Layout (little-endian):
#   magic     8 bytes  b"EDLOGIT1"
#   classes   uint32
#   count     uint64
#   hash      64 bytes ascii hex sha256 of the dataset/teacher content key
#   records   count x (int64 sample id, float32[classes])
#   digest    32 bytes sha256 over everything above

MAGIC = b"EDLOGIT1"
_HEADER = struct.Struct("<8sIQ64s")


class StoreMismatch(ValueError):
    pass


class LogitStore:
    def __init__(self, sample_ids: np.ndarray, logits: np.ndarray, content_hash: str):
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        self.logits = np.asarray(logits, dtype=np.float32)
        self.content_hash = content_hash
        self._row = {int(s): i for i, s in enumerate(self.sample_ids)}
        self.hits = 0
        self.misses = 0

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def __len__(self) -> int:
        return len(self.sample_ids)

    def get(self, sample_ids) -> torch.Tensor:
        rows = []
        for s in np.asarray(sample_ids).tolist():
            r = self._row.get(int(s))
            if r is None:
                self.misses += 1
                raise KeyError(f"sample {s} not in logit store")
            self.hits += 1
            rows.append(r)
        return torch.from_numpy(self.logits[rows])

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def to_bytes(self) -> bytes:
        rec = np.empty(len(self), dtype=[("id", "<i8"), ("logits", "<f4", (self.num_classes,))])
        rec["id"] = self.sample_ids
        rec["logits"] = self.logits
        body = _HEADER.pack(MAGIC, self.num_classes, len(self), self.content_hash.encode("ascii")) + rec.tobytes()
        return body + hashlib.sha256(body).digest()

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, expected_hash: str | None = None) -> "LogitStore":
        if len(raw) < _HEADER.size + 32:
            raise StoreMismatch("logit store truncated")
        body, digest = raw[:-32], raw[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise StoreMismatch("logit store digest mismatch (file altered or truncated)")
        magic, classes, count, h = _HEADER.unpack_from(body)
        if magic != MAGIC:
            raise StoreMismatch("not a logit store")
        content_hash = h.decode("ascii")
        if expected_hash is not None and content_hash != expected_hash:
            raise StoreMismatch("logit store was built for different data or teachers")
        dtype = np.dtype([("id", "<i8"), ("logits", "<f4", (classes,))])
        rec = np.frombuffer(body, dtype=dtype, count=count, offset=_HEADER.size)
        return cls(rec["id"].copy(), rec["logits"].copy(), content_hash)

    @classmethod
    def load(cls, path: Path, expected_hash: str | None = None) -> "LogitStore":
        return cls.from_bytes(Path(path).read_bytes(), expected_hash)


def store_key(data: ArrayDataset, part: SubDatasetPartition, assignment: TeacherAssignment) -> str:
    h = hashlib.sha256()
    h.update(data.content_hash().encode())
    h.update(part.to_text().encode())
    for t, d in assignment.digests().items():
        h.update(f"{t}:{d}".encode())
    return h.hexdigest()


def cache_teacher_outputs(
    assignment: TeacherAssignment,
    data: ArrayDataset,
    part: SubDatasetPartition,
    path: Path | None = None,
) -> LogitStore:
    """Routed teacher logits for every train sample that belongs to a subset."""
    ids = part.subset_ids(data, "train")
    idx = np.flatnonzero(ids > 0)
    g = teacher_logits(assignment, data.x[torch.as_tensor(idx)], torch.as_tensor(ids[idx]))
    store = LogitStore(idx, g.numpy(), store_key(data, part, assignment))
    if path is not None:
        store.save(path)
    return store
