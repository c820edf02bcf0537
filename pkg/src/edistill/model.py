"""Student block graphs and per-stage model assembly.

A student network is described as ``stem -> blocks[0] -> ... -> blocks[-1] -> decoder``.
During staged training the network is grown from a prefix of its blocks. Every
intermediate stage ends in a teaching-reference head (1x1 conv adapter, adaptive
average pool, shared classifier); the last stage ends in the student's own decoder,
so the finished model is the plain student network.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

import torch
import torch.nn as nn

BLOCK_KINDS = ("basic", "vgg", "mobile")


@dataclass(frozen=True)
class StemSpec:
    channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class BlockSpec:
    """One coarse block of the backbone (e.g. a residual stage).

    ``stride`` is the spatial reduction factor applied by the block and ``depth``
    the number of repeated units inside it.
    """

    id: str
    kind: str
    channels: int
    stride: int = 1
    depth: int = 1
    expand: int = 1


@dataclass(frozen=True)
class DecoderSpec:
    hidden: tuple[int, ...] = ()
    in_channels: int | None = None


@dataclass(frozen=True)
class StudentSpec:
    in_channels: int
    stem: StemSpec
    blocks: tuple[BlockSpec, ...]
    num_classes: int
    decoder: DecoderSpec = field(default_factory=DecoderSpec)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if self.in_channels < 1 or self.stem.channels < 1:
            raise ValueError("channel counts must be positive")
        if not self.blocks:
            raise ValueError("student needs at least one block")
        ids = [b.id for b in self.blocks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"block ids must be unique, got {ids}")
        for b in self.blocks:
            if b.channels < 1 or b.depth < 1 or b.stride < 1 or b.expand < 1:
                raise ValueError(f"block {b.id!r}: channels/depth/stride/expand must be positive")
            if b.kind not in BLOCK_KINDS:
                raise ValueError(f"block {b.id!r}: unknown kind {b.kind!r}, expected one of {BLOCK_KINDS}")

    @property
    def block_ids(self) -> list[str]:
        return [b.id for b in self.blocks]

    @property
    def feature_channels(self) -> int:
        return self.blocks[-1].channels

    def check_decoder(self) -> None:
        din = self.decoder.in_channels
        if din is not None and din != self.feature_channels:
            raise ValueError(
                f"decoder expects {din} input channels but last block "
                f"{self.blocks[-1].id!r} emits {self.feature_channels}"
            )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["blocks"] = [dict(b) for b in d["blocks"]]
        d["decoder"]["hidden"] = list(self.decoder.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StudentSpec":
        d = dict(d)
        unknown = set(d) - {"in_channels", "stem", "blocks", "num_classes", "decoder"}
        if unknown:
            raise ValueError(f"unknown student keys: {sorted(unknown)}")
        decoder = dict(d.get("decoder") or {})
        decoder["hidden"] = tuple(decoder.get("hidden", ()))
        return cls(
            in_channels=int(d["in_channels"]),
            stem=StemSpec(**d["stem"]),
            blocks=tuple(BlockSpec(**b) for b in d["blocks"]),
            num_classes=int(d["num_classes"]),
            decoder=DecoderSpec(**decoder),
        )


# ---------------------------------------------------------------------------
# Layer builders


class BasicUnit(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU()
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class InvertedResidual(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, expand: int):
        super().__init__()
        hidden = cin * expand
        layers: list[nn.Module] = []
        if expand != 1:
            layers += [nn.Conv2d(cin, hidden, 1, bias=False), nn.BatchNorm2d(hidden), nn.ReLU6()]
        layers += [
            nn.Conv2d(hidden, hidden, 3, stride=stride, padding=1, groups=hidden, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU6(),
            nn.Conv2d(hidden, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        ]
        self.conv = nn.Sequential(*layers)
        self.use_residual = stride == 1 and cin == cout

    def forward(self, x):
        out = self.conv(x)
        return x + out if self.use_residual else out


def build_stem(spec: StudentSpec) -> nn.Module:
    s = spec.stem
    return nn.Sequential(
        nn.Conv2d(spec.in_channels, s.channels, s.kernel, stride=s.stride, padding=s.kernel // 2, bias=False),
        nn.BatchNorm2d(s.channels),
        nn.ReLU(),
    )


def block_in_channels(spec: StudentSpec, index: int) -> int:
    return spec.stem.channels if index == 0 else spec.blocks[index - 1].channels


def build_block(spec: StudentSpec, index: int) -> nn.Module:
    b = spec.blocks[index]
    cin = block_in_channels(spec, index)
    units: list[nn.Module] = []
    if b.kind == "basic":
        for i in range(b.depth):
            units.append(BasicUnit(cin if i == 0 else b.channels, b.channels, b.stride if i == 0 else 1))
    elif b.kind == "mobile":
        for i in range(b.depth):
            units.append(InvertedResidual(cin if i == 0 else b.channels, b.channels, b.stride if i == 0 else 1, b.expand))
    else:  # vgg
        for i in range(b.depth):
            units += [
                nn.Conv2d(cin if i == 0 else b.channels, b.channels, 3, padding=1, bias=False),
                nn.BatchNorm2d(b.channels),
                nn.ReLU(),
            ]
        if b.stride > 1:
            units.append(nn.MaxPool2d(b.stride))
    return nn.Sequential(*units)


def build_classifier(spec: StudentSpec) -> nn.Sequential:
    """The classifier shared by every teaching-reference head and the final decoder."""
    layers: list[nn.Module] = []
    width = spec.feature_channels
    for h in spec.decoder.hidden:
        layers += [nn.Linear(width, h), nn.ReLU()]
        width = h
    layers.append(nn.Linear(width, spec.num_classes))
    return nn.Sequential(*layers)


class Decoder(nn.Module):
    """Original student decoder: global average pool followed by the classifier."""

    def __init__(self, classifier: nn.Module):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.flatten = nn.Flatten()
        self.classifier = classifier

    def forward(self, x):
        return self.classifier(self.flatten(self.pool(x)))


class TRHead(nn.Module):
    """Temporary head used before the final stage.

    The 1x1 adapter lifts the current block's channels to the classifier input
    width; the pool collapses any spatial size to 1x1.
    """

    def __init__(self, adapter: nn.Conv2d, classifier: nn.Module):
        super().__init__()
        self.adapter = adapter
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.flatten = nn.Flatten()
        self.classifier = classifier

    def forward(self, x):
        return self.classifier(self.flatten(self.pool(self.adapter(x))))


class Student(nn.Module):
    """The full student network built directly from its spec."""

    def __init__(self, spec: StudentSpec):
        super().__init__()
        spec.check_decoder()
        self.spec = spec
        self.stem = build_stem(spec)
        self.blocks = nn.ModuleList(build_block(spec, i) for i in range(len(spec.blocks)))
        self.decoder = Decoder(build_classifier(spec))

    def forward(self, x):
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return self.decoder(x)


# ---------------------------------------------------------------------------
# Staged assembly


def _seeded(seed: int, build, *args):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build(*args)


def _component_seed(seed: int, stage: int, slot: int) -> int:
    # slot 0: stem/blocks, 1: adapter, 2: classifier
    return seed * 1000 + stage * 10 + slot


class StageModel(nn.Module):
    """Student prefix for stage ``stage`` of ``num_stages``.

    Stem and blocks introduced in earlier stages are frozen: their parameters have
    ``requires_grad=False`` and the modules stay in eval mode even when the model is
    put in training mode, so normalization statistics do not drift either.
    """

    def __init__(
        self,
        spec: StudentSpec,
        stage: int,
        num_stages: int,
        stem: nn.Module,
        blocks: Sequence[nn.Module],
        block_ids: Sequence[str],
        head: nn.Module,
        frozen_blocks: int,
    ):
        super().__init__()
        self.spec = spec
        self.stage = stage
        self.num_stages = num_stages
        self.block_ids = list(block_ids)
        self.stem = stem
        self.blocks = nn.ModuleList(blocks)
        if isinstance(head, Decoder):
            self.decoder = head
        else:
            self.head = head
        # frozen_blocks counts stem-inclusive modules: 0 = nothing, k = stem + blocks[:k-1]
        self.frozen_blocks = frozen_blocks
        for m in self.frozen_modules():
            for p in m.parameters():
                p.requires_grad_(False)
        self.frozen_param_ids = frozenset(
            name for name, p in self.named_parameters() if not p.requires_grad
        )
        self.train(False)

    @property
    def is_final(self) -> bool:
        return hasattr(self, "decoder")

    @property
    def output_head(self) -> nn.Module:
        return self.decoder if self.is_final else self.head

    def frozen_modules(self) -> list[nn.Module]:
        if self.frozen_blocks == 0:
            return []
        return [self.stem, *list(self.blocks)[: self.frozen_blocks - 1]]

    def train(self, mode: bool = True):
        super().train(mode)
        for m in self.frozen_modules():
            m.train(False)
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, x):
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return self.output_head(x)


def _stage_of_block(schedule, spec: StudentSpec) -> dict[str, int]:
    owner: dict[str, int] = {}
    for stage, ids in enumerate(schedule.block_allocation, start=1):
        for bid in ids:
            owner[bid] = stage
    missing = [bid for bid in spec.block_ids if bid not in owner]
    if missing:
        raise ValueError(f"block allocation leaves blocks unassigned: {missing}")
    extra = [bid for bid in owner if bid not in spec.block_ids]
    if extra:
        raise ValueError(f"block allocation names unknown blocks: {extra}")
    # stages must cover a contiguous prefix in order
    order = [owner[bid] for bid in spec.block_ids]
    if order != sorted(order):
        raise ValueError("block allocation must follow the block order of the student")
    return owner


def blocks_for_stage(spec: StudentSpec, schedule, t: int) -> int:
    """Number of leading blocks active at stage ``t``."""
    owner = _stage_of_block(schedule, spec)
    return sum(1 for bid in spec.block_ids if owner[bid] <= t)


def _build_head(spec: StudentSpec, n_active: int, stage: int, classifier: nn.Module, seed: int, final: bool):
    if final:
        return Decoder(classifier)
    cin = spec.blocks[n_active - 1].channels
    adapter = _seeded(_component_seed(seed, stage, 1), nn.Conv2d, cin, spec.feature_channels, 1)
    return TRHead(adapter, classifier)


def assemble_stage_model(spec: StudentSpec, schedule, t: int, seed: int = 0) -> StageModel:
    """Build the stage-``t`` model from scratch with seeded initialization.

    Parameters of blocks owned by stage ``s`` are drawn from a stream seeded by
    ``(seed, s)``, so assembling stage 2 directly reproduces the values that
    stage 1 started from on the shared prefix.
    """
    T = schedule.num_stages
    if not 1 <= t <= T:
        raise ValueError(f"stage index {t} out of range 1..{T}")
    spec.check_decoder()
    owner = _stage_of_block(schedule, spec)

    def build_stage_blocks(stage: int):
        mods = []
        if stage == 1:
            mods.append(build_stem(spec))
        for i, bid in enumerate(spec.block_ids):
            if owner[bid] == stage:
                mods.append(build_block(spec, i))
        return mods

    modules: list[nn.Module] = []
    for s in range(1, t + 1):
        modules += _seeded(_component_seed(seed, s, 0), build_stage_blocks, s)
    stem, blocks = modules[0], modules[1:]
    classifier = _seeded(_component_seed(seed, 0, 2), build_classifier, spec)
    n_active = len(blocks)
    head = _build_head(spec, n_active, t, classifier, seed, final=(t == T))
    frozen = 0 if t == 1 else 1 + blocks_for_stage(spec, schedule, t - 1)
    return StageModel(spec, t, T, stem, blocks, spec.block_ids[:n_active], head, frozen)


def _grow(model: StageModel, spec: StudentSpec, schedule, seed: int, fine_tune_all: bool) -> StageModel:
    T = schedule.num_stages
    t = model.stage
    bad = [n for n, p in model.named_parameters() if n in model.frozen_param_ids and p.requires_grad]
    if bad:
        raise RuntimeError(f"stage {t} model has unfrozen parameters marked frozen: {bad[:3]}")
    nxt = t + 1
    n_prev = len(model.blocks)
    n_next = blocks_for_stage(spec, schedule, nxt)
    stem = copy.deepcopy(model.stem)
    blocks = [copy.deepcopy(b) for b in model.blocks]
    classifier = copy.deepcopy(model.output_head.classifier)

    def new_blocks():
        return [build_block(spec, i) for i in range(n_prev, n_next)]

    blocks += _seeded(_component_seed(seed, nxt, 0), new_blocks)
    head = _build_head(spec, n_next, nxt, classifier, seed, final=(nxt == T))
    frozen = 1 + n_prev
    out = StageModel(spec, nxt, T, stem, blocks, spec.block_ids[:n_next], head, frozen)
    if fine_tune_all and nxt == T:
        for p in out.parameters():
            p.requires_grad_(True)
        out.frozen_blocks = 0
        out.frozen_param_ids = frozenset()
    return out


def advance_stage(model: StageModel, spec: StudentSpec, schedule, seed: int = 0, fine_tune_all: bool = False) -> StageModel:
    """Move from stage t to t+1.

    The old adapter and pool are dropped, everything trained so far except the
    shared classifier is frozen, and the next blocks are appended. The input model
    is not modified; carried modules are copied.
    """
    if model.stage >= schedule.num_stages:
        raise ValueError(f"cannot advance past the final stage {schedule.num_stages}")
    if model.stage + 1 == schedule.num_stages:
        return restore_final_architecture(model, spec, schedule, seed=seed, fine_tune_all=fine_tune_all)
    return _grow(model, spec, schedule, seed, fine_tune_all)


def restore_final_architecture(model: StageModel, spec: StudentSpec, schedule, seed: int = 0, fine_tune_all: bool = False) -> StageModel:
    """Append the last blocks and swap the teaching-reference head for the original decoder."""
    spec.check_decoder()
    if model.stage != schedule.num_stages - 1:
        raise ValueError(
            f"restoration needs the stage {schedule.num_stages - 1} model, got stage {model.stage}"
        )
    return _grow(model, spec, schedule, seed, fine_tune_all)


# ---------------------------------------------------------------------------
# Structural fingerprints


def _shape(t: torch.Tensor) -> str:
    return "x".join(str(s) for s in t.shape) or "scalar"


def fingerprint(module: nn.Module) -> list[str]:
    """Ordered ``layer_kind shape`` lines for every leaf layer."""
    lines = []
    for _, m in module.named_modules():
        if any(True for _ in m.children()):
            continue
        kind = type(m).__name__
        params = [_shape(p) for p in m.parameters(recurse=False)]
        if params:
            shape = ",".join(params)
        elif isinstance(m, nn.AdaptiveAvgPool2d):
            size = m.output_size if isinstance(m.output_size, tuple) else (m.output_size, m.output_size)
            shape = "x".join(str(s) for s in size)
        elif isinstance(m, nn.MaxPool2d):
            shape = f"k{m.kernel_size}"
        else:
            shape = "-"
        lines.append(f"{kind} {shape}")
    return lines


def fingerprint_text(module: nn.Module) -> str:
    return "\n".join(fingerprint(module)) + "\n"


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Built-in student/teacher specs


def _cifar_resnet(depth: int, num_classes: int, width: int = 1, in_channels: int = 3) -> StudentSpec:
    if (depth - 2) % 6:
        raise ValueError("resnet depth must be 6n+2")
    n = (depth - 2) // 6
    chans = [16 * width, 32 * width, 64 * width]
    return StudentSpec(
        in_channels=in_channels,
        stem=StemSpec(16),
        blocks=(
            BlockSpec("layer1", "basic", chans[0], 1, n),
            BlockSpec("layer2", "basic", chans[1], 2, n),
            BlockSpec("layer3", "basic", chans[2], 2, n),
        ),
        num_classes=num_classes,
    )


def _vgg(cfg: Iterable[tuple[int, int]], num_classes: int, in_channels: int = 3, hidden=()) -> StudentSpec:
    blocks = tuple(BlockSpec(f"block{i + 1}", "vgg", c, 2, d) for i, (c, d) in enumerate(cfg))
    return StudentSpec(in_channels, StemSpec(blocks[0].channels), blocks, num_classes, DecoderSpec(tuple(hidden)))


def _mobile(num_classes: int, in_channels: int = 3, widths=(16, 24, 32), expand: int = 6, depth: int = 2) -> StudentSpec:
    blocks = tuple(
        BlockSpec(f"ir{i + 1}", "mobile", c, 1 if i == 0 else 2, depth, expand) for i, c in enumerate(widths)
    )
    return StudentSpec(in_channels, StemSpec(16), blocks, num_classes)


def builtin_spec(name: str, num_classes: int, in_channels: int = 3) -> StudentSpec:
    """Named architectures; toy variants are small enough for CPU tests."""
    name = name.lower()
    if name.startswith("resnet") and name[6:].isdigit():
        return _cifar_resnet(int(name[6:]), num_classes, in_channels=in_channels)
    if name.startswith("wrn"):
        depth, k = name[3:].split("_")
        return _cifar_resnet(int(depth), num_classes, width=int(k), in_channels=in_channels)
    table = {
        "vgg8": lambda: _vgg([(64, 1), (128, 1), (256, 1)], num_classes, in_channels),
        "vgg13": lambda: _vgg([(64, 2), (128, 2), (256, 2), (512, 2)], num_classes, in_channels),
        "mobilenetv2": lambda: _mobile(num_classes, in_channels, widths=(24, 32, 64, 96), depth=2),
        "cnn3_toy": lambda: _vgg([(16, 1), (32, 1), (64, 1)], num_classes, in_channels),
        "cnn3_teacher": lambda: _vgg([(32, 1), (64, 1), (64, 1)], num_classes, in_channels),
        "resnet_toy": lambda: StudentSpec(
            in_channels,
            StemSpec(8),
            (
                BlockSpec("layer1", "basic", 8, 1, 1),
                BlockSpec("layer2", "basic", 16, 2, 1),
                BlockSpec("layer3", "basic", 24, 2, 1),
                BlockSpec("layer4", "basic", 32, 2, 1),
            ),
            num_classes,
        ),
        "vgg_toy": lambda: _vgg([(8, 1), (16, 2), (32, 1)], num_classes, in_channels, hidden=(32,)),
        "mobile_toy": lambda: _mobile(num_classes, in_channels, widths=(8, 12, 16), expand=2, depth=1),
    }
    if name not in table:
        raise ValueError(f"unknown architecture {name!r}")
    return table[name]()
