"""Torch-side helpers shared by the scheme implementations."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from wbmark.core import BCE_EPS, BitString
from wbmark.errors import InputError


def bits_tensor(b: BitString) -> torch.Tensor:
    return torch.from_numpy(b.bits.astype(np.float32))


def bce_vec(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """-sum_j (b_j log y_j + (1-b_j) log(1-y_j)) on a single prediction vector."""
    y = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(y) + (1.0 - target) * torch.log1p(-y)).sum()


def bce_rows(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-row bit-sum cross entropy averaged over the batch rows."""
    y = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    per_row = -(target * torch.log(y) + (1.0 - target) * torch.log1p(-y)).sum(dim=1)
    return per_row.mean()


def bce_logits_vec(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Same bit-sum cross entropy, computed from logits.

    Equals bce_vec(sigmoid(logits), target) but keeps a useful gradient
    when the sigmoid saturates (float32 rounds sigma(z) to exactly 0/1
    for |z| ~ 90, where the clamped probability form goes flat).
    """
    return torch.nn.functional.binary_cross_entropy_with_logits(
        logits, target, reduction="sum")


def soft_to_numpy(pred: torch.Tensor) -> np.ndarray:
    """Detach a sigmoid output into a float64 vector safe for thresholding."""
    return np.clip(pred.detach().cpu().numpy().astype(np.float64), 0.0, 1.0)


def mean_over_rows(weight: torch.Tensor) -> torch.Tensor:
    """Filter-mean feature front end: conv (n,d,s,s) -> flat (d*s*s); FC (out,in) -> (in,).

    Averages over the filters (output channels / output neurons) and
    flattens the remainder.
    """
    if weight.ndim < 2:
        raise InputError(f"need a weight tensor with >= 2 dims, got shape {tuple(weight.shape)}")
    return weight.mean(dim=0).reshape(-1)


def fc_weight(model: nn.Module, layer_index: int) -> torch.Tensor:
    """Weight matrix of the FC layer addressed by the activation layer index."""
    fcs = [m for m in model.modules() if isinstance(m, nn.Linear)]
    if not (0 <= layer_index < len(fcs)):
        raise InputError(f"layer index {layer_index} out of range [0, {len(fcs)})")
    return fcs[layer_index].weight


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & (2**63 - 1))
    return g


def init_mlp(widths: list[int], seed: int, final_sigmoid: bool = True) -> nn.Sequential:
    """Small fully-connected net with seeded initialization.

    Layers must be constructed inside the forked-RNG scope: nn.Linear
    draws its initial parameters at construction time.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        layers: list[nn.Module] = []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(widths) - 2:
                layers.append(nn.ReLU())
        if final_sigmoid:
            layers.append(nn.Sigmoid())
        net = nn.Sequential(*layers)
    return net


def net_state_numpy(net: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32)
            for k, v in net.state_dict().items()}


def load_net_state(net: nn.Module, state: dict[str, np.ndarray]) -> nn.Module:
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
    return net
