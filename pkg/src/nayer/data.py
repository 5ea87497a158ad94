"""Dataset ingestion: small image classification sets as in-memory tensors.

``digits`` ships inside scikit-learn, so it works with no network or cache
and is the default desk-scale dataset. ``mnist``/``cifar10``/``cifar100``
load through torchvision from the cache directory given by the
``NAYER_DATA_DIR`` env var (a download is attempted when the files are
missing, which only succeeds on machines with network access).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch

from .errors import DatasetError

DATA_DIR_ENV = "NAYER_DATA_DIR"

# Deterministic train/test split for datasets that ship unsplit.
_SPLIT_SEED = 931247


@dataclass
class DatasetBundle:
    name: str
    train_x: torch.Tensor  # (N, C, H, W) float32 in [0, 1]
    train_y: torch.Tensor  # (N,) int64
    test_x: torch.Tensor
    test_y: torch.Tensor
    class_names: list[str]
    normalize_mean: tuple[float, ...]
    normalize_std: tuple[float, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])


class Normalizer:
    """Per-channel (x - mean) / std on [0, 1] images."""

    def __init__(self, mean: tuple[float, ...], std: tuple[float, ...]):
        self.mean = tuple(mean)
        self.std = tuple(std)
        self._m = torch.tensor(mean).view(1, -1, 1, 1)
        self._s = torch.tensor(std).view(1, -1, 1, 1)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self._m.to(x.dtype)) / self._s.to(x.dtype)


def resolve_data_dir(data_dir: str | None) -> str:
    return data_dir or os.environ.get(DATA_DIR_ENV, os.path.expanduser("~/.cache/nayer-data"))


def _load_digits() -> DatasetBundle:
    from sklearn.datasets import load_digits

    raw = load_digits()
    x = torch.tensor(raw.data, dtype=torch.float32).view(-1, 1, 8, 8) / 16.0
    y = torch.tensor(raw.target, dtype=torch.long)

    # Stratified 80/20 split, fixed permutation per class.
    g = torch.Generator()
    g.manual_seed(_SPLIT_SEED)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = torch.nonzero(y == c, as_tuple=True)[0]
        idx = idx[torch.randperm(idx.numel(), generator=g)]
        cut = int(round(idx.numel() * 0.8))
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    train_idx = torch.cat(train_idx)
    test_idx = torch.cat(test_idx)
    train_idx = train_idx[torch.randperm(train_idx.numel(), generator=g)]
    test_idx = test_idx[torch.randperm(test_idx.numel(), generator=g)]

    train_x, train_y = x[train_idx], y[train_idx]
    mean = float(train_x.mean())
    std = float(train_x.std())
    return DatasetBundle(
        name="digits",
        train_x=train_x,
        train_y=train_y,
        test_x=x[test_idx],
        test_y=y[test_idx],
        class_names=[str(i) for i in range(10)],
        normalize_mean=(round(mean, 4),),
        normalize_std=(round(std, 4),),
    )


def _from_torchvision(name: str, data_dir: str | None) -> DatasetBundle:
    import torchvision

    root = resolve_data_dir(data_dir)
    factories = {
        "mnist": (torchvision.datasets.MNIST, (0.1307,), (0.3081,)),
        "cifar10": (torchvision.datasets.CIFAR10, (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
        "cifar100": (torchvision.datasets.CIFAR100, (0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    }
    factory, mean, std = factories[name]
    try:
        train = factory(root, train=True, download=True)
        test = factory(root, train=False, download=True)
    except Exception as exc:
        raise DatasetError(
            f"dataset {name!r} is not cached under {root} and could not be downloaded: {exc}"
        ) from exc

    def to_tensors(ds):
        data = torch.as_tensor(ds.data if isinstance(ds.data, torch.Tensor) else torch.from_numpy(ds.data))
        data = data.to(torch.float32) / 255.0
        if data.ndim == 3:  # (N, H, W) grayscale
            data = data.unsqueeze(1)
        else:  # (N, H, W, C)
            data = data.permute(0, 3, 1, 2)
        labels = torch.as_tensor(ds.targets, dtype=torch.long)
        return data.contiguous(), labels

    train_x, train_y = to_tensors(train)
    test_x, test_y = to_tensors(test)
    class_names = [str(c) for c in getattr(train, "classes", range(int(train_y.max()) + 1))]
    return DatasetBundle(name, train_x, train_y, test_x, test_y, class_names, mean, std)


def load_dataset(name: str, data_dir: str | None = None) -> DatasetBundle:
    if name == "digits":
        return _load_digits()
    if name in ("mnist", "cifar10", "cifar100"):
        return _from_torchvision(name, data_dir)
    raise DatasetError(f"unknown dataset {name!r}; known: digits, mnist, cifar10, cifar100")


def dataset_available(name: str, data_dir: str | None = None) -> bool:
    """True when the dataset can actually be materialized in this environment."""
    try:
        load_dataset(name, data_dir)
        return True
    except DatasetError:
        return False
