"""Benchmark architectures, baseline training, activation access.

The four benchmarks:

    1  MNIST    MLP     784-512FC-512FC-10FC
    2  CIFAR10  CNN     3*32*32-32C3(1)-32C3(1)-MP2(1)-64C3(1)-64C3(1)-MP2(1)-512FC-10FC
    3  CIFAR10  ResNet18
    4  MNIST    LeNet   1*28*28-24C3(1)-BN-24C3(1)-BN-128FC-64FC-10FC

Each model exposes `forward_with_preacts`, returning the logits plus the
pre-activation output of every fully-connected layer; watermarks read
those pre-activation maps (signed values, no ReLU/Sigmoid applied).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from wbmark.checkpoint import Checkpoint
from wbmark.data import DatasetSplit
from wbmark.errors import InputError, TrainingError


@dataclass(frozen=True)
class BenchmarkSpec:
    id: int
    dataset: str
    arch: str
    description: str
    baseline_accuracy_target: float
    default_epochs: int


BENCHMARKS = {
    1: BenchmarkSpec(1, "mnist", "bm1_mlp", "784-512FC-512FC-10FC", 0.9854, 30),
    2: BenchmarkSpec(2, "cifar10", "bm2_cnn",
                     "3*32*32-32C3(1)-32C3(1)-MP2(1)-64C3(1)-64C3(1)-MP2(1)-512FC-10FC",
                     0.8681, 60),
    3: BenchmarkSpec(3, "cifar10", "bm3_resnet18", "ResNet18", 0.9085, 80),
    4: BenchmarkSpec(4, "mnist", "bm4_lenet",
                     "1*28*28-24C3(1)-BN-24C3(1)-BN-128FC-64FC-10FC", 0.9899, 30),
}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InputError(f"invalid training config {self}")
        if self.optimizer not in ("adam", "sgd"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ActivationBatch:
    """Activation maps of one fully-connected layer: values (batch, m)."""

    layer_index: int
    values: torch.Tensor
    pre_activation: bool = True


class _FcStack(nn.Module):
    """Shared FC head: ReLU between layers, pre-activations recorded."""

    def __init__(self, widths: list[int]):
        super().__init__()
        self.fcs = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths, widths[1:]))

    def forward_with_preacts(self, x: torch.Tensor):
        preacts = []
        for i, fc in enumerate(self.fcs):
            x = fc(x)
            preacts.append(x)
            if i < len(self.fcs) - 1:
                x = torch.relu(x)
        return x, preacts


class Bm1Mlp(nn.Module):
    arch = "bm1_mlp"
    input_shape = (1, 28, 28)

    def __init__(self):
        super().__init__()
        self.head = _FcStack([784, 512, 512, 10])

    def forward_with_preacts(self, x):
        return self.head.forward_with_preacts(x.flatten(1))

    def forward(self, x):
        return self.forward_with_preacts(x)[0]


class Bm2Cnn(nn.Module):
    arch = "bm2_cnn"
    input_shape = (3, 32, 32)

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3), nn.ReLU(),
            nn.Conv2d(32, 32, 3), nn.ReLU(),
            nn.MaxPool2d(2, stride=1),
            nn.Conv2d(32, 64, 3), nn.ReLU(),
            nn.Conv2d(64, 64, 3), nn.ReLU(),
            nn.MaxPool2d(2, stride=1),
        )
        self.head = _FcStack([64 * 22 * 22, 512, 10])

    def forward_with_preacts(self, x):
        return self.head.forward_with_preacts(self.features(x).flatten(1))

    def forward(self, x):
        return self.forward_with_preacts(x)[0]


class Bm4LeNet(nn.Module):
    arch = "bm4_lenet"
    input_shape = (1, 28, 28)

    def __init__(self, conv_width: int = 24, fc_widths: tuple[int, int] = (128, 64)):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, conv_width, 3), nn.BatchNorm2d(conv_width), nn.ReLU(),
            nn.Conv2d(conv_width, conv_width, 3), nn.BatchNorm2d(conv_width), nn.ReLU(),
        )
        flat = conv_width * 24 * 24
        self.head = _FcStack([flat, fc_widths[0], fc_widths[1], 10])

    def forward_with_preacts(self, x):
        return self.head.forward_with_preacts(self.features(x).flatten(1))

    def forward(self, x):
        return self.forward_with_preacts(x)[0]


class LeNetSmall(Bm4LeNet):
    """Reduced-width LeNet used for the property-inference model pool."""

    arch = "lenet_small"

    def __init__(self):
        super().__init__(conv_width=8, fc_widths=(64, 32))


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class Bm3ResNet18(nn.Module):
    """ResNet18 with the 3x3 stem conventional for 32x32 inputs.

    It has a single FC layer, so the watermark point is the pooled
    512-d feature vector feeding it (post-ReLU, the only penultimate
    vector available).
    """

    arch = "bm3_resnet18"
    input_shape = (3, 32, 32)

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        layers = []
        cin = 64
        for cout, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            layers += [_BasicBlock(cin, cout, stride), _BasicBlock(cout, cout, 1)]
            cin = cout
        self.blocks = nn.Sequential(*layers)
        self.fc = nn.Linear(512, 10)

    def forward_with_preacts(self, x):
        x = torch.relu(self.bn1(self.conv1(x)))
        x = self.blocks(x)
        pooled = x.mean(dim=(2, 3))
        logits = self.fc(pooled)
        return logits, [pooled, logits]

    def forward(self, x):
        return self.forward_with_preacts(x)[0]


_ARCHS: dict[str, Callable[[], nn.Module]] = {
    "bm1_mlp": Bm1Mlp,
    "bm2_cnn": Bm2Cnn,
    "bm3_resnet18": Bm3ResNet18,
    "bm4_lenet": Bm4LeNet,
    "lenet_small": LeNetSmall,
}


def build_model(spec: int | str | BenchmarkSpec, seed: int) -> nn.Module:
    """Instantiate an architecture with seeded (reproducible) initialization."""
    if isinstance(spec, BenchmarkSpec):
        arch = spec.arch
    elif isinstance(spec, int) or (isinstance(spec, str) and spec.isdigit()):
        bid = int(spec)
        if bid not in BENCHMARKS:
            raise InputError(f"unknown benchmark id {bid} (expected 1-4)")
        arch = BENCHMARKS[bid].arch
    else:
        arch = str(spec)
    if arch not in _ARCHS:
        raise InputError(f"unknown architecture {arch!r}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = _ARCHS[arch]()
    return model


def n_fc_layers(model: nn.Module) -> int:
    with torch.no_grad():
        x = torch.zeros((1, *model.input_shape))
        return len(model.forward_with_preacts(x)[1])


def default_watermark_layer(model: nn.Module) -> int:
    """Second-to-last layer, the embedding point used throughout."""
    return n_fc_layers(model) - 2


def activation_maps(model: nn.Module, layer_index: int, inputs: torch.Tensor,
                    batch_size: int = 1000) -> ActivationBatch:
    """Pre-activation maps of FC layer `layer_index` for an input batch."""
    n_layers = n_fc_layers(model)
    if not (0 <= layer_index < n_layers):
        raise InputError(f"layer index {layer_index} out of range [0, {n_layers})")
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, inputs.shape[0], batch_size):
            _, pre = model.forward_with_preacts(inputs[i:i + batch_size])
            outs.append(pre[layer_index])
    pre_act = not (model.arch == "bm3_resnet18" and layer_index == 0)
    return ActivationBatch(layer_index, torch.cat(outs), pre_activation=pre_act)


def state_to_checkpoint(model: nn.Module, meta: dict | None = None) -> Checkpoint:
    tensors = {k: v.detach().cpu().numpy().astype(np.float32)
               for k, v in model.state_dict().items()}
    return Checkpoint(arch=model.arch, tensors=tensors, meta=dict(meta or {}))


def checkpoint_to_model(ckpt: Checkpoint) -> nn.Module:
    model = build_model(ckpt.arch, seed=0)
    state = model.state_dict()
    if set(state) != set(ckpt.tensors):
        missing = set(state) ^ set(ckpt.tensors)
        raise InputError(f"checkpoint/architecture tensor names disagree: {sorted(missing)}")
    for name, ref in state.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise InputError(f"tensor {name!r}: shape {arr.shape} != expected {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    model.load_state_dict(state)
    model.eval()
    return model


def to_tensors(split: DatasetSplit) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.from_numpy(split.images), torch.from_numpy(split.labels)


def batch_indices(n: int, batch_size: int, generator: torch.Generator | None,
                  shuffle: bool = True):
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate,
                                weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9,
                           weight_decay=cfg.weight_decay)


@torch.no_grad()
def evaluate_accuracy(model_or_ckpt, split: DatasetSplit, batch_size: int = 1000) -> float:
    """Fraction of argmax-correct predictions over a split."""
    model = (checkpoint_to_model(model_or_ckpt)
             if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt)
    if tuple(split.input_shape) != tuple(model.input_shape):
        raise InputError(f"input shape {split.input_shape} does not match "
                         f"model {model.arch} {model.input_shape}")
    model.eval()
    x, y = to_tensors(split)
    correct = 0
    for i in range(0, len(split), batch_size):
        pred = model(x[i:i + batch_size]).argmax(dim=1)
        correct += int((pred == y[i:i + batch_size]).sum())
    return correct / len(split)


def train_task(model: nn.Module, train: DatasetSplit, epochs: int,
               cfg: TrainConfig, generator: torch.Generator,
               lr_for_epoch: Callable[[int], float] | None = None,
               on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Cross-entropy training loop; returns mean train loss per epoch.

    Raises TrainingError (with the epoch index) on NaN loss.
    """
    opt = make_optimizer(model.parameters(), cfg)
    loss_fn = nn.CrossEntropyLoss()
    x, y = to_tensors(train)
    losses = []
    for epoch in range(epochs):
        if lr_for_epoch is not None:
            lr = lr_for_epoch(epoch)
            for g in opt.param_groups:
                g["lr"] = lr
        model.train()
        total, count = 0.0, 0
        for idx in batch_indices(len(train), cfg.batch_size, generator):
            opt.zero_grad()
            loss = loss_fn(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        mean_loss = total / count
        if not np.isfinite(mean_loss):
            raise TrainingError(f"training loss diverged at epoch {epoch}", epoch=epoch)
        losses.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return losses


def train_baseline(spec: int | BenchmarkSpec, train: DatasetSplit, test: DatasetSplit,
                   cfg: TrainConfig,
                   on_epoch: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Train a benchmark from scratch; returns a checkpoint with metadata."""
    bench = BENCHMARKS[spec] if isinstance(spec, int) else spec
    model = build_model(bench, seed=cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    losses = train_task(model, train, cfg.epochs, cfg, gen, on_epoch=on_epoch)
    acc = evaluate_accuracy(model, test)
    meta = {
        "benchmark_id": bench.id,
        "dataset": bench.dataset,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "weight_decay": cfg.weight_decay,
        "optimizer": cfg.optimizer,
        "seed": cfg.seed,
        "final_accuracy": acc,
        "first_epoch_loss": losses[0] if losses else None,
        "last_epoch_loss": losses[-1] if losses else None,
    }
    return state_to_checkpoint(model, meta)
