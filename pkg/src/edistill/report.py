"""Metrics log, accuracy evaluation, forgetting matrix and report rendering."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable

import torch
import torch.nn as nn

FIELDS = ("run_id", "epoch", "stage", "split", "subset_id", "metric", "value", "wall_time")
STAGE_NAMES = {3: ("Primary", "Middle", "University")}


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    epoch: int
    stage: int
    split: str
    subset_id: str  # "1".."T" or "all"
    metric: str
    value: float
    wall_time: float = 0.0

    @property
    def key(self) -> tuple:
        return (self.run_id, self.epoch, self.split, self.subset_id, self.metric)

    def to_line(self) -> str:
        return "\t".join(
            repr(float(v)) if f.name in ("value", "wall_time") else str(v)
            for f, v in zip(fields(self), astuple(self))
        )

    @classmethod
    def from_line(cls, line: str) -> "MetricsRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(FIELDS):
            raise ValueError(f"malformed metrics line: {line!r}")
        run_id, epoch, stage, split, subset, metric, value, wall = parts
        return cls(run_id, int(epoch), int(stage), split, subset, metric, float(value), float(wall))


class MetricsLog:
    """Append-only tab-separated log with a header line."""

    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[MetricsRecord] = []
        self._keys: set[tuple] = set()
        if self.path is not None and self.path.exists():
            for r in read_metrics(self.path):
                self._add(r)

    def _add(self, r: MetricsRecord) -> None:
        if r.key in self._keys:
            raise ValueError(f"duplicate metrics record {r.key}")
        self._keys.add(r.key)
        self.records.append(r)

    def append(self, r: MetricsRecord) -> None:
        self._add(r)
        if self.path is not None:
            new = not self.path.exists()
            with self.path.open("a") as fh:
                if new:
                    fh.write("\t".join(FIELDS) + "\n")
                fh.write(r.to_line() + "\n")

    def truncate(self, n: int) -> None:
        """Drop records past the first ``n``. Only used when resuming from a checkpoint."""
        self.records = self.records[:n]
        self._keys = {r.key for r in self.records}
        if self.path is not None:
            write_metrics(self.path, self.records)

    def __len__(self) -> int:
        return len(self.records)


def write_metrics(path: Path, records: Iterable[MetricsRecord]) -> None:
    with Path(path).open("w") as fh:
        fh.write("\t".join(FIELDS) + "\n")
        for r in records:
            fh.write(r.to_line() + "\n")


def read_metrics(path: Path) -> list[MetricsRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != FIELDS:
        raise ValueError(f"{path} is not a metrics log")
    return [MetricsRecord.from_line(l) for l in lines[1:] if l]


# ---------------------------------------------------------------------------
# Accuracy


@torch.no_grad()
def top1_accuracy(model: nn.Module, data, batch_size: int = 512) -> float:
    """Percent of samples whose argmax logit equals the label.

    ``data`` is an (x, y) tensor pair, anything with ``tensors()`` or ``x``/``y``,
    or an iterable of (x_batch, y_batch).
    """
    if hasattr(data, "tensors"):
        data = data.tensors()
    elif hasattr(data, "x") and hasattr(data, "y"):
        data = (data.x, data.y)
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], torch.Tensor):
        x, y = data
        batches = ((x[i : i + batch_size], y[i : i + batch_size]) for i in range(0, len(y), batch_size))
    else:
        batches = data
    was_training = model.training
    model.eval()
    correct = total = 0
    for xb, yb in batches:
        correct += int((model(xb).argmax(dim=1) == yb).sum())
        total += len(yb)
    model.train(was_training)
    if total == 0:
        raise ValueError("cannot compute accuracy on an empty dataset")
    return 100.0 * correct / total


# ---------------------------------------------------------------------------
# Forgetting matrix


@dataclass
class ForgettingMatrix:
    """Rows are stage ends, columns subsets; ``None`` marks a subset not yet introduced."""

    entries: list[list[float | None]]
    stage_end_epochs: list[int]

    @property
    def num_stages(self) -> int:
        return len(self.entries)

    def row_names(self) -> list[str]:
        return list(STAGE_NAMES.get(self.num_stages, [f"Stage {s}" for s in range(1, self.num_stages + 1)]))

    def to_markdown(self) -> str:
        T = self.num_stages
        head = "| Stage | " + " | ".join(f"Sub-dataset {t}" for t in range(1, T + 1)) + " |"
        sep = "|" + "---|" * (T + 1)
        rows = [head, sep]
        for name, row in zip(self.row_names(), self.entries):
            cells = ["/" if v is None else f"{v:.2f}" for v in row]
            rows.append(f"| {name} | " + " | ".join(cells) + " |")
        return "\n".join(rows) + "\n"


def parse_markdown_table(text: str) -> list[list[float | None]]:
    out = []
    for line in text.strip().splitlines()[2:]:
        cells = [c.strip() for c in line.strip().strip("|").split("|")][1:]
        out.append([None if c == "/" else float(c) for c in cells])
    return out


def stage_ends(records: list[MetricsRecord]) -> list[int]:
    """Last epoch of every stage: the epoch before each advance, then the final epoch."""
    advances = sorted(r.epoch for r in records if r.metric == "advance")
    last = max((r.epoch for r in records if r.split == "test" and r.metric == "top1"), default=None)
    if last is None:
        raise ValueError("metrics log has no test evaluations")
    return [e - 1 for e in advances] + [last]


def forgetting_matrix(records: list[MetricsRecord]) -> ForgettingMatrix:
    ends = stage_ends(records)
    T = len(ends)
    acc = {
        (r.epoch, r.subset_id): r.value
        for r in records
        if r.split == "test" and r.metric == "top1"
    }
    entries = []
    for s, epoch in enumerate(ends, start=1):
        row: list[float | None] = []
        for t in range(1, T + 1):
            if t > s:
                row.append(None)
                continue
            if (epoch, str(t)) not in acc:
                raise ValueError(f"missing stage-end evaluation for stage {s} (epoch {epoch}), subset {t}")
            row.append(acc[(epoch, str(t))])
        entries.append(row)
    return ForgettingMatrix(entries, ends)


# ---------------------------------------------------------------------------
# Rendering


def advance_markers(records: list[MetricsRecord]) -> list[int]:
    return sorted(r.epoch for r in records if r.metric == "advance")


def _accuracy_series(records, subset_id: str):
    pts = sorted((r.epoch, r.value) for r in records if r.split == "test" and r.metric == "top1" and r.subset_id == subset_id)
    return [p[0] for p in pts], [p[1] for p in pts]


def _plot(path: Path, records, subset_id: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs, ys = _accuracy_series(records, subset_id)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, marker=".", lw=1)
    for e in advance_markers(records):
        ax.axvline(e, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("top-1 test accuracy (%)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def render_report(records: list[MetricsRecord], matrix: ForgettingMatrix, out_dir: Path) -> list[Path]:
    """Write the CSV export, the forgetting table and 1 + T accuracy plots."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write report to {out_dir}: {e}") from e
    written = []

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in records:
        w.writerow([r.run_id, r.epoch, r.stage, r.split, r.subset_id, r.metric, repr(r.value), repr(r.wall_time)])
    p = out_dir / "metrics.csv"
    p.write_text(buf.getvalue())
    written.append(p)

    p = out_dir / "forgetting.md"
    p.write_text(matrix.to_markdown())
    written.append(p)

    p = out_dir / "accuracy_all.png"
    _plot(p, records, "all", "full test set")
    written.append(p)
    for t in range(1, matrix.num_stages + 1):
        p = out_dir / f"accuracy_subset{t}.png"
        _plot(p, records, str(t), f"sub-dataset {t}")
        written.append(p)
    return written
