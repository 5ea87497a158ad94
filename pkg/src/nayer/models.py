"""BN-bearing classifiers, teacher pretraining, and the instrumented forward.

Every architecture here interleaves 2-D batch normalization with its convs,
because the synthesis objective penalizes the gap between a batch's BN-input
statistics and the frozen running statistics of the same layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetBundle, Normalizer, load_dataset
from .errors import ConfigError, ShapeError
from .utils import generator_from, stable_seed

_VAR_FLOOR = 1e-5


@dataclass
class BNStatRecord:
    """Per-BN-layer snapshot from one instrumented forward pass.

    ``running_*`` are the layer's frozen statistics (detached copies);
    ``batch_*`` are the statistics of this batch's layer input and stay
    attached to the autograd graph so the BN loss can drive the images.
    """

    layer_id: str
    running_mean: torch.Tensor
    running_var: torch.Tensor
    batch_mean: torch.Tensor
    batch_var: torch.Tensor

    def __post_init__(self) -> None:
        widths = {t.shape for t in (self.running_mean, self.running_var, self.batch_mean, self.batch_var)}
        if len(widths) != 1:
            raise ShapeError(f"record {self.layer_id}: statistic widths disagree: {widths}")


class SmallCNN(nn.Module):
    """Conv-BN-ReLU x2 per block, max-pooled between blocks, GAP head."""

    def __init__(self, widths: tuple[int, ...], in_shape: tuple[int, int, int], num_classes: int):
        super().__init__()
        c, h, w = in_shape
        self.in_shape = tuple(in_shape)
        self.num_classes = num_classes
        layers: list[nn.Module] = []
        prev = c
        for width in widths:
            layers += [
                nn.Conv2d(prev, width, 3, padding=1),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, 3, padding=1),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            prev = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev, num_classes)

    def features_and_logits(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.features(x)
        feat = F.adaptive_avg_pool2d(z, 1).flatten(1)
        return feat, self.head(feat)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features_and_logits(x)[1]


class _WRNBlock(nn.Module):
    def __init__(self, in_planes: int, out_planes: int, stride: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, out_planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_planes)
        self.conv2 = nn.Conv2d(out_planes, out_planes, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != out_planes:
            self.shortcut = nn.Conv2d(in_planes, out_planes, 1, stride=stride, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(x))
        skip = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv2(F.relu(self.bn2(self.conv1(out))))
        return out + skip


class WideResNet(nn.Module):
    """Standard pre-activation wide residual network (depth = 6n + 4)."""

    def __init__(self, depth: int, widen: int, in_shape: tuple[int, int, int], num_classes: int):
        super().__init__()
        if (depth - 4) % 6 != 0:
            raise ConfigError(f"WRN depth must be 6n+4, got {depth}")
        n = (depth - 4) // 6
        c = in_shape[0]
        self.in_shape = tuple(in_shape)
        self.num_classes = num_classes
        planes = [16, 16 * widen, 32 * widen, 64 * widen]
        self.conv0 = nn.Conv2d(c, planes[0], 3, padding=1, bias=False)
        stages = []
        prev = planes[0]
        for stage, width in enumerate(planes[1:]):
            for b in range(n):
                stride = 2 if stage > 0 and b == 0 else 1
                stages.append(_WRNBlock(prev, width, stride))
                prev = width
        self.blocks = nn.Sequential(*stages)
        self.bn_out = nn.BatchNorm2d(prev)
        self.head = nn.Linear(prev, num_classes)

    def features_and_logits(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = F.relu(self.bn_out(self.blocks(self.conv0(x))))
        feat = F.adaptive_avg_pool2d(z, 1).flatten(1)
        return feat, self.head(feat)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features_and_logits(x)[1]


_CNN_PRESETS = {
    "cnn-small": (32, 64, 128),
    "cnn-mini": (16, 32),
    "cnn-tiny": (8,),
}


def make_model(arch: str, in_shape: tuple[int, int, int], num_classes: int, seed: int = 0) -> nn.Module:
    """Build a classifier by architecture id, with seeded initialization.

    Ids: ``cnn-small`` / ``cnn-mini`` / ``cnn-tiny``, ``cnn:w1,w2,...`` for
    explicit block widths, or ``wrn-<depth>-<widen>``.
    """
    with torch.random.fork_rng():
        torch.manual_seed(stable_seed("model", arch, seed))
        if arch in _CNN_PRESETS:
            return SmallCNN(_CNN_PRESETS[arch], in_shape, num_classes)
        if arch.startswith("cnn:"):
            widths = tuple(int(w) for w in arch[4:].split(","))
            return SmallCNN(widths, in_shape, num_classes)
        if arch.startswith("wrn-"):
            try:
                _, depth, widen = arch.split("-")
                return WideResNet(int(depth), int(widen), in_shape, num_classes)
            except ValueError as exc:
                raise ConfigError(f"bad WRN id {arch!r}, want wrn-<depth>-<widen>") from exc
    raise ConfigError(f"unknown architecture {arch!r}")


def bn_layer_ids(model: nn.Module) -> list[str]:
    return [name for name, m in model.named_modules() if isinstance(m, nn.BatchNorm2d)]


def instrumented_forward(model: nn.Module, images: torch.Tensor) -> tuple[torch.Tensor, list[BNStatRecord]]:
    """Eval-pathway forward that records each BN layer's input statistics.

    The model's own normalization uses its frozen running statistics and no
    running statistic is mutated; only the batch mean/variance of each BN
    input is captured (attached to the graph, biased variance, eps-floored).
    """
    if tuple(images.shape[1:]) != tuple(model.in_shape):
        raise ShapeError(f"images {tuple(images.shape[1:])} do not match model input {model.in_shape}")
    records: list[BNStatRecord] = []
    hooks = []

    def grab(layer_id, module):
        def hook(_mod, inputs):
            x = inputs[0]
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            records.append(
                BNStatRecord(
                    layer_id=layer_id,
                    running_mean=module.running_mean.detach().clone(),
                    running_var=module.running_var.detach().clone().clamp_min(_VAR_FLOOR),
                    batch_mean=mean,
                    batch_var=var.clamp_min(_VAR_FLOOR),
                )
            )

        return hook

    was_training = model.training
    model.eval()
    try:
        for name, module in model.named_modules():
            if isinstance(module, nn.BatchNorm2d):
                hooks.append(module.register_forward_pre_hook(grab(name, module)))
        logits = model(images)
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return logits, records


@torch.no_grad()
def evaluate(model: nn.Module, images: torch.Tensor, labels: torch.Tensor,
             normalizer: Normalizer | None = None, batch_size: int = 512) -> float:
    """Top-1 accuracy in [0, 1] over an in-memory split."""
    if images.shape[0] == 0:
        raise ShapeError("cannot evaluate on an empty split")
    was_training = model.training
    model.eval()
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        x = images[start:start + batch_size]
        if normalizer is not None:
            x = normalizer(x)
        pred = model(x).argmax(dim=1)
        correct += int((pred == labels[start:start + batch_size]).sum())
    model.train(was_training)
    return correct / images.shape[0]


def pretrain_teacher(
    dataset: str | DatasetBundle,
    arch: str,
    epochs: int,
    batch_size: int = 128,
    lr: float = 0.1,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    seed: int = 0,
    data_dir: str | None = None,
    log_fn=None,
) -> tuple[nn.Module, float, DatasetBundle]:
    """Train a teacher with SGD and a cosine-annealed learning rate.

    Returns (model, top-1 test accuracy, dataset bundle). Fully seeded:
    identical arguments give an identical teacher.
    """
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    bundle = dataset if isinstance(dataset, DatasetBundle) else load_dataset(dataset, data_dir)
    normalizer = Normalizer(bundle.normalize_mean, bundle.normalize_std)
    model = make_model(arch, bundle.image_shape, bundle.num_classes, seed=seed)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)

    n = bundle.train_x.shape[0]
    model.train()
    for epoch in range(epochs):
        for group in opt.param_groups:
            group["lr"] = 0.5 * lr * (1 + math.cos(math.pi * epoch / epochs))
        perm = torch.randperm(n, generator=generator_from("pretrain", seed, epoch))
        total_loss = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            x = normalizer(bundle.train_x[idx])
            y = bundle.train_y[idx]
            opt.zero_grad()
            loss = F.cross_entropy(model(x), y)
            loss.backward()
            opt.step()
            total_loss += float(loss.detach()) * idx.numel()
        if log_fn is not None:
            acc = evaluate(model, bundle.test_x, bundle.test_y, normalizer)
            log_fn(epoch, total_loss / n, acc)

    test_acc = evaluate(model, bundle.test_x, bundle.test_y, normalizer)
    return model, test_acc, bundle
