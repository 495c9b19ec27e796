"""Static weight watermarking via a secret random projection matrix.

Features are the filter-mean of the chosen layer's weights; embedding
fine-tunes the model so that sigmoid(w @ A) thresholds to the payload.
Two equivalent formulations are provided: the direct regularizer and
the single-perceptron reformulation in which a parameter vector theta
is trained against the columns of A while being tethered to the
extracted features.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from wbmark.checkpoint import Checkpoint
from wbmark.core import BitString, ber, hard_threshold
from wbmark.errors import InputError
from wbmark.keybundle import KeyBundle
from wbmark.models import (TrainConfig, batch_indices, checkpoint_to_model,
                           default_watermark_layer, evaluate_accuracy,
                           make_optimizer, to_tensors)
from wbmark.schemes import common


@dataclass
class UchidaKeys:
    layer_index: int
    matrix: np.ndarray  # (v, l) from N(0,1)
    seed: int

    @property
    def payload_bits(self) -> int:
        return int(self.matrix.shape[1])

    def to_bundle(self) -> KeyBundle:
        return KeyBundle(scheme="uchida", rng_seed=self.seed,
                         payload_bits=self.payload_bits,
                         meta={"layer_index": self.layer_index},
                         blobs={"matrix": self.matrix})

    @classmethod
    def from_bundle(cls, b: KeyBundle) -> "UchidaKeys":
        return cls(layer_index=int(b.meta["layer_index"]),
                   matrix=b.blobs["matrix"], seed=b.rng_seed)


def features_from_weight(weight) -> np.ndarray:
    """Mean over filters then flatten: (n,d,s,s) -> (d*s*s,), (out,in) -> (in,)."""
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim < 2:
        raise InputError(f"need a >=2-d weight tensor, got shape {w.shape}")
    return w.mean(axis=0).reshape(-1)


def _layer_weight(target, layer_index: int) -> np.ndarray:
    if isinstance(target, Checkpoint):
        model = checkpoint_to_model(target)
    else:
        model = target
    return common.fc_weight(model, layer_index).detach().cpu().numpy()


def extract_features(target, layer_index: int) -> np.ndarray:
    """Filter-mean feature vector w of the chosen layer."""
    return features_from_weight(_layer_weight(target, layer_index))


def project(w, matrix) -> np.ndarray:
    """Componentwise sigmoid of w @ A."""
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(matrix, dtype=np.float64)
    if w.ndim != 1 or a.ndim != 2 or w.shape[0] != a.shape[0]:
        raise InputError(f"shape mismatch: w {w.shape} vs A {a.shape}")
    return 1.0 / (1.0 + np.exp(-(w @ a)))


def project_perceptron(w, matrix) -> np.ndarray:
    """Perceptron view: per-column sigmoid(theta . A_i) with theta := w."""
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(matrix, dtype=np.float64)
    if w.ndim != 1 or a.ndim != 2 or w.shape[0] != a.shape[0]:
        raise InputError(f"shape mismatch: w {w.shape} vs A {a.shape}")
    out = np.empty(a.shape[1])
    for i in range(a.shape[1]):
        out[i] = 1.0 / (1.0 + np.exp(-float(np.dot(w, a[:, i]))))
    return out


def generate_keys(model, payload_bits: int, seed: int,
                  layer_index: int | None = None) -> UchidaKeys:
    if layer_index is None:
        layer_index = default_watermark_layer(model)
    v = common.fc_weight(model, layer_index).shape[1]
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((int(v), int(payload_bits))).astype(np.float32)
    return UchidaKeys(layer_index=layer_index, matrix=matrix, seed=seed)


def watermark_loss(weight: torch.Tensor, matrix: torch.Tensor,
                   target_bits: torch.Tensor) -> torch.Tensor:
    """E_wat = BCE(sigmoid(mean-features @ A), b), differentiable in the weight.

    Computed in logits form so the gradient survives sigmoid saturation.
    """
    w = common.mean_over_rows(weight)
    return common.bce_logits_vec(w @ matrix, target_bits)


def extract(target, keys: UchidaKeys) -> BitString:
    """Hard-threshold the projected features of the watermark layer."""
    return hard_threshold(project(extract_features(target, keys.layer_index), keys.matrix))


def embed(base: Checkpoint, payload: BitString, keys: UchidaKeys,
          train, test, *, lam: float = 1.0, cfg: TrainConfig | None = None,
          seed: int = 0, method: str = "direct") -> tuple[Checkpoint, UchidaKeys, dict]:
    """Fine-tune the base model until the projection encodes the payload.

    method 'direct' regularizes with BCE(sigmoid(wA), b); 'perceptron'
    trains a separate theta against the columns of A with a squared
    tether ||theta - w||^2. Returns (checkpoint, keys, report); a
    nonzero final BER is reported, not raised.
    """
    if len(payload) != keys.payload_bits:
        raise InputError(f"payload length {len(payload)} != key width {keys.payload_bits}")
    if method not in ("direct", "perceptron"):
        raise InputError(f"unknown embedding method {method!r}")
    cfg = cfg or TrainConfig(epochs=5, seed=seed)
    model = checkpoint_to_model(base)
    weight = common.fc_weight(model, keys.layer_index)
    matrix = torch.from_numpy(keys.matrix.astype(np.float32))
    target = common.bits_tensor(payload)

    opt = make_optimizer(model.parameters(), cfg)
    theta = None
    theta_opt = None
    if method == "perceptron":
        theta = torch.nn.Parameter(
            torch.from_numpy(extract_features(model, keys.layer_index).astype(np.float32)))
        theta_opt = torch.optim.Adam([theta], lr=cfg.learning_rate)

    loss_fn = torch.nn.CrossEntropyLoss()
    x, y = to_tensors(train)
    gen = common.seeded_generator(seed)
    history = {"task_loss": [], "wat_loss": [], "ber": []}
    t0 = time.time()
    for _ in range(cfg.epochs):
        model.train()
        task_sum = wat_sum = 0.0
        steps = 0
        for idx in batch_indices(len(train), cfg.batch_size, gen):
            opt.zero_grad()
            if theta_opt is not None:
                theta_opt.zero_grad()
            task = loss_fn(model(x[idx]), y[idx])
            if method == "direct":
                wat = watermark_loss(weight, matrix, target)
            else:
                w = common.mean_over_rows(weight)
                wat = (common.bce_logits_vec(matrix.T @ theta, target)
                       + ((theta - w) ** 2).sum())
            (task + lam * wat).backward()
            opt.step()
            if theta_opt is not None:
                theta_opt.step()
            task_sum += float(task.detach())
            wat_sum += float(wat.detach())
            steps += 1
        history["task_loss"].append(task_sum / steps)
        history["wat_loss"].append(wat_sum / steps)
        history["ber"].append(ber(extract(model, keys), payload))
    final_ber = ber(extract(model, keys), payload)
    acc = evaluate_accuracy(model, test)
    report = {"scheme": "uchida", "method": method, "ber": final_ber,
              "accuracy": acc, "converged": final_ber == 0.0,
              "epochs": cfg.epochs, "lambda": lam,
              "seconds": time.time() - t0, "history": history}
    meta = dict(base.meta)
    meta.update({"watermarked": "uchida", "embed_seed": seed})
    from wbmark.models import state_to_checkpoint
    return state_to_checkpoint(model, meta), keys, report
