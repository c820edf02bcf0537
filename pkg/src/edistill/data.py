"""In-memory classification datasets and the built-in synthetic blob dataset."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class ArrayDataset:
    x: torch.Tensor
    y: torch.Tensor

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"x has {len(self.x)} rows but y has {len(self.y)}")

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i):
        return self.x[i], int(self.y[i])

    @property
    def labels(self) -> np.ndarray:
        return self.y.numpy()

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x.numpy()).tobytes())
        h.update(np.ascontiguousarray(self.y.numpy().astype("<i8")).tobytes())
        return h.hexdigest()


@dataclass
class SplitDataset:
    name: str
    train: ArrayDataset
    test: ArrayDataset
    num_classes: int

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train.x.shape[1:])

    def split(self, which: str) -> ArrayDataset:
        if which not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {which!r}")
        return self.train if which == "train" else self.test


def synthetic_blobs(
    num_classes: int = 9,
    train_per_class: int = 60,
    test_per_class: int = 30,
    channels: int = 3,
    size: int = 8,
    noise: float = 1.0,
    separation: float = 1.0,
    spatial: bool = False,
    seed: int = 0,
) -> SplitDataset:
    """Gaussian blobs rendered as small images.

    Each class has a random mean in channel space, constant over the image
    (``spatial=True`` draws a full random mean image instead); samples add
    per-pixel Gaussian noise. ``separation`` scales the class means.
    """
    rng = np.random.default_rng(seed)
    if spatial:
        means = rng.normal(0.0, separation, size=(num_classes, channels, size, size))
    else:
        centers = rng.normal(0.0, separation, size=(num_classes, channels, 1, 1))
        means = np.broadcast_to(centers, (num_classes, channels, size, size))

    def draw(per_class: int) -> ArrayDataset:
        y = np.repeat(np.arange(num_classes), per_class)
        x = means[y] + rng.normal(0.0, noise, size=(len(y), channels, size, size))
        return ArrayDataset(torch.from_numpy(x.astype(np.float32)), torch.from_numpy(y.astype(np.int64)))

    train = draw(train_per_class)
    test = draw(test_per_class)
    return SplitDataset("synthetic", train, test, num_classes)


def load_dataset(name: str, root: str | None = None, **kwargs) -> SplitDataset:
    if name == "synthetic":
        return synthetic_blobs(**kwargs)
    if name in ("cifar100", "cifar10"):
        return _load_cifar(name, root or "./data")
    raise ValueError(f"unknown dataset {name!r}")


def _load_cifar(name: str, root: str) -> SplitDataset:
    import torchvision

    cls = torchvision.datasets.CIFAR100 if name == "cifar100" else torchvision.datasets.CIFAR10
    mean = np.array([0.507, 0.487, 0.441], dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.array([0.267, 0.256, 0.276], dtype=np.float32).reshape(1, 3, 1, 1)

    def convert(ds) -> ArrayDataset:
        x = ds.data.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
        x = (x - mean) / std
        return ArrayDataset(torch.from_numpy(x), torch.tensor(ds.targets, dtype=torch.int64))

    train = convert(cls(root, train=True, download=False))
    test = convert(cls(root, train=False, download=False))
    return SplitDataset(name, train, test, 100 if name == "cifar100" else 10)
