"""Removal and detection attacks run against watermarked checkpoints.

Post-attack BER is always measured with the original owner keys by the
caller; the attack functions themselves never see them (the overwrite
attack takes only a scheme name, payload size and attacker seed).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from wbmark import schemes
from wbmark.checkpoint import Checkpoint
from wbmark.core import BitString, ber, derive_rng, derive_seed
from wbmark.data import DatasetSplit
from wbmark.errors import InputError
from wbmark.models import (TrainConfig, activation_maps, build_model,
                           checkpoint_to_model, evaluate_accuracy,
                           default_watermark_layer, state_to_checkpoint,
                           to_tensors, train_task)
from wbmark.schemes import common


def prunable_names(ckpt: Checkpoint) -> list[str]:
    """Trainable weight tensors: *.weight with >= 2 dims (biases and BN scales excluded)."""
    return sorted(n for n, t in ckpt.tensors.items()
                  if n.endswith(".weight") and t.ndim >= 2)


def prune(ckpt: Checkpoint, alpha: float) -> Checkpoint:
    """Zero the floor(alpha% * size) smallest-magnitude weights of each layer.

    Ties at the magnitude cutoff break by flat parameter index (stable),
    so pruning is deterministic and idempotent at fixed alpha.
    """
    if not (0.0 <= alpha <= 100.0):
        raise InputError(f"alpha must lie in [0, 100], got {alpha}")
    out = ckpt.copy()
    for name in prunable_names(out):
        t = out.tensors[name]
        flat = t.reshape(-1).copy()
        k = int(np.floor(alpha / 100.0 * flat.size))
        if k > 0:
            order = np.argsort(np.abs(flat), kind="stable")
            flat[order[:k]] = 0.0
        out.tensors[name] = flat.reshape(t.shape)
    out.meta = dict(out.meta)
    out.meta["pruned_alpha"] = alpha
    return out


def prune_sweep(ckpt: Checkpoint, keys, payload: BitString, alphas,
                test: DatasetSplit, train: DatasetSplit | None = None) -> dict:
    """Accuracy and owner-key BER after pruning at each alpha (ascending)."""
    alphas = list(alphas)
    if alphas != sorted(alphas):
        raise InputError("alphas must be sorted ascending")
    entries = []
    t0 = time.time()
    for alpha in alphas:
        pruned = prune(ckpt, alpha)
        acc = evaluate_accuracy(pruned, test)
        bits = schemes.extract(keys, pruned, train=train)
        entries.append({"alpha": float(alpha), "accuracy": acc,
                        "ber": ber(bits, payload)})
    return {"kind": "prune_sweep", "entries": entries, "seconds": time.time() - t0}


def finetune_attack(ckpt: Checkpoint, train: DatasetSplit, epochs: int,
                    record_epochs=None, seed: int = 0) -> dict[int, Checkpoint]:
    """Retrain on the task loss only, with the training learning rate
    multiplied by 10 and divided back by 10 after 20 epochs.

    Returns checkpoints keyed by completed-epoch count; `epochs` itself
    is always included, 0 epochs is the identity.
    """
    lr = ckpt.meta.get("learning_rate")
    if lr is None:
        raise InputError("checkpoint carries no learning-rate metadata")
    record = sorted(set(record_epochs or []) | {epochs})
    if any(e < 0 or e > epochs for e in record):
        raise InputError(f"record epochs {record} outside [0, {epochs}]")
    snapshots: dict[int, Checkpoint] = {}
    if 0 in record:
        snapshots[0] = ckpt.copy()
    if epochs == 0:
        return snapshots
    model = checkpoint_to_model(ckpt)
    cfg = TrainConfig(epochs=epochs,
                      batch_size=int(ckpt.meta.get("batch_size", 128)),
                      learning_rate=float(lr),
                      weight_decay=float(ckpt.meta.get("weight_decay", 0.0)),
                      optimizer=str(ckpt.meta.get("optimizer", "adam")),
                      seed=seed)
    gen = common.seeded_generator(seed)

    def lr_for_epoch(epoch: int) -> float:
        return float(lr) * 10.0 if epoch < 20 else float(lr)

    def on_epoch(epoch: int, _loss: float):
        done = epoch + 1
        if done in record:
            meta = dict(ckpt.meta)
            meta["finetune_attack_epochs"] = done
            snapshots[done] = state_to_checkpoint(model, meta)

    train_task(model, train, epochs, cfg, gen, lr_for_epoch=lr_for_epoch,
               on_epoch=on_epoch)
    return snapshots


def overwrite_attack(ckpt: Checkpoint, scheme: str, payload_bits: int,
                     attacker_seed: int, train: DatasetSplit, test: DatasetSplit,
                     scheme_params: dict | None = None,
                     embed_params: dict | None = None) -> dict:
    """Embed a fresh watermark with independently generated attacker keys.

    The attacker knows the scheme and the (default) watermark layer but
    never the owner keys. Returns the attacked checkpoint plus the
    attacker's own keys/payload and embedding report.
    """
    model = checkpoint_to_model(ckpt)
    payload = BitString.random(payload_bits, derive_rng(attacker_seed, "overwrite-payload"))
    keys = schemes.generate_keys(scheme, model, payload_bits,
                                 seed=derive_seed(attacker_seed, "overwrite-keys"),
                                 train=train, **(scheme_params or {}))
    attacked, attacker_keys, report = schemes.embed(
        scheme, ckpt, payload, keys, train, test,
        seed=derive_seed(attacker_seed, "overwrite-embed"), **(embed_params or {}))
    return {"kind": "overwrite", "checkpoint": attacked, "attacker_keys": attacker_keys,
            "attacker_payload": payload, "attacker_ber": report["ber"],
            "attacker_accuracy": report["accuracy"], "report": report}


def distribution_report(wat_ckpt: Checkpoint, base_ckpt: Checkpoint,
                        layer_index: int, test: DatasetSplit,
                        bins: int = 100) -> dict:
    """Weight and activation histograms plus two-sample KS statistics.

    Activations are collected over the whole given split at the
    watermark layer; weights are that layer's weight matrix.
    """
    if wat_ckpt.arch != base_ckpt.arch:
        raise InputError(f"architecture mismatch: {wat_ckpt.arch} vs {base_ckpt.arch}")
    wat_model = checkpoint_to_model(wat_ckpt)
    base_model = checkpoint_to_model(base_ckpt)
    images, _ = to_tensors(test)

    w_wat = common.fc_weight(wat_model, layer_index).detach().numpy().ravel()
    w_base = common.fc_weight(base_model, layer_index).detach().numpy().ravel()
    a_wat = activation_maps(wat_model, layer_index, images).values.numpy().ravel()
    a_base = activation_maps(base_model, layer_index, images).values.numpy().ravel()

    def paired_hist(x, y):
        lo = float(min(x.min(), y.min()))
        hi = float(max(x.max(), y.max()))
        edges = np.linspace(lo, hi, bins + 1)
        cx, _ = np.histogram(x, bins=edges)
        cy, _ = np.histogram(y, bins=edges)
        return {"edges": edges.tolist(), "watermarked": cx.tolist(),
                "baseline": cy.tolist()}

    return {
        "kind": "distribution",
        "layer_index": layer_index,
        "ks_weights": float(stats.ks_2samp(w_wat, w_base).statistic),
        "ks_activations": float(stats.ks_2samp(a_wat, a_base).statistic),
        "weights_hist": paired_hist(w_wat, w_base),
        "activations_hist": paired_hist(a_wat, a_base),
    }


@dataclass
class PiaPool:
    """Labeled watermark-layer feature vectors from trained models."""

    features: np.ndarray   # (n, d) float32
    labels: np.ndarray     # (n,) int8; 1 = watermarked
    arch: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise InputError("feature/label count mismatch")


def pia_generate_pool(train: DatasetSplit, test: DatasetSplit, n_watermarked: int,
                      n_clean: int, *, scheme: str = "diction",
                      arch: str = "lenet_small", seed: int = 0,
                      train_epochs: int = 3, subset_size: int = 12000,
                      embed_epochs: int = 2, payload_bits: int = 256,
                      accuracy_floor: float = 0.95,
                      proj_widths: tuple[int, int] = (128, 128),
                      log=None) -> PiaPool:
    """Train n_clean + n_watermarked small models and collect their
    watermark-layer weight vectors.

    Every pool member must reach the accuracy floor on the full test
    split, and watermarked members must embed to BER 0; failures are
    excluded (logged in meta) and replacement seeds are drawn.
    """
    if n_watermarked < 1 or n_clean < 1:
        raise InputError("need at least one model per class")
    from wbmark.schemes import diction

    feats, labels = [], []
    excluded = []
    quotas = [(0, n_clean), (1, n_watermarked)]
    attempt = 0
    max_attempts = 3 * (n_clean + n_watermarked)
    for label, quota in quotas:
        made = 0
        while made < quota:
            if attempt >= max_attempts:
                raise InputError(f"pool generation exceeded {max_attempts} attempts")
            mseed = derive_seed(seed, "pia-model", label, attempt)
            attempt += 1
            rng = derive_rng(mseed, "subset")
            idx = rng.permutation(len(train))[:subset_size]
            sub = train.subset(idx)
            model = build_model(arch, seed=mseed)
            cfg = TrainConfig(epochs=train_epochs, batch_size=100, seed=mseed)
            train_task(model, sub, train_epochs, cfg, common.seeded_generator(mseed))
            acc = evaluate_accuracy(model, test)
            if acc < accuracy_floor:
                excluded.append({"seed": mseed, "reason": "accuracy", "accuracy": acc})
                if log:
                    log(f"excluded model (acc {acc:.3f} < floor {accuracy_floor})")
                continue
            layer = default_watermark_layer(model)
            if label == 1:
                payload = BitString.random(payload_bits, derive_rng(mseed, "payload"))
                keys = diction.generate_keys(model, payload_bits,
                                             seed=derive_seed(mseed, "keys"),
                                             proj_widths=proj_widths)
                base = state_to_checkpoint(model, {"benchmark_id": 0})
                hyper = diction.DictionHyper(epochs=embed_epochs, batch_size=100)
                wat, _, report = diction.embed(base, payload, keys, sub, test,
                                               hyper=hyper, seed=mseed)
                if report["ber"] != 0.0 or report["accuracy"] < accuracy_floor:
                    excluded.append({"seed": mseed, "reason": "embedding",
                                     "ber": report["ber"],
                                     "accuracy": report["accuracy"]})
                    if log:
                        log(f"excluded watermarked model (ber {report['ber']:.3f}, "
                            f"acc {report['accuracy']:.3f})")
                    continue
                model = checkpoint_to_model(wat)
            w = common.fc_weight(model, layer).detach().numpy().ravel()
            feats.append(w.astype(np.float32))
            labels.append(label)
            made += 1
            if log:
                log(f"pool model {len(feats)}/{n_clean + n_watermarked} "
                    f"label={label} acc={acc:.4f}")
    return PiaPool(features=np.stack(feats), labels=np.asarray(labels, dtype=np.int8),
                   arch=arch,
                   meta={"scheme": scheme, "excluded": excluded,
                         "accuracy_floor": accuracy_floor,
                         "train_epochs": train_epochs, "subset_size": subset_size,
                         "embed_epochs": embed_epochs, "payload_bits": payload_bits})


def pia_train_detector(pool: PiaPool, holdout_fraction: float = 0.25,
                       epochs: int = 50, seed: int = 0) -> tuple[torch.nn.Module, float, float]:
    """Train the meta-classifier; returns (detector, train_acc, test_acc)."""
    n = len(pool.labels)
    if not (0.0 < holdout_fraction < 1.0):
        raise InputError(f"holdout fraction must lie in (0,1), got {holdout_fraction}")
    rng = derive_rng(seed, "pia-split")
    order = rng.permutation(n)
    n_hold = max(1, int(round(holdout_fraction * n)))
    hold, fit = order[:n_hold], order[n_hold:]
    for name, part in (("train", fit), ("holdout", hold)):
        if len(np.unique(pool.labels[part])) < 2:
            raise InputError(f"{name} split contains a single class")

    mu = pool.features[fit].mean(axis=0)
    sd = pool.features[fit].std(axis=0) + 1e-8
    x = torch.from_numpy(((pool.features - mu) / sd).astype(np.float32))
    y = torch.from_numpy(pool.labels.astype(np.float32))

    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "pia-detector"))
        det = torch.nn.Sequential(
            torch.nn.Linear(pool.features.shape[1], 256), torch.nn.ReLU(),
            torch.nn.Linear(256, 128), torch.nn.ReLU(),
            torch.nn.Linear(128, 1), torch.nn.Sigmoid())
    opt = torch.optim.Adam(det.parameters(), lr=1e-3)
    bce = torch.nn.BCELoss()
    gen = common.seeded_generator(derive_seed(seed, "pia-batches"))
    fit_t = torch.from_numpy(fit)
    for _ in range(epochs):
        perm = fit_t[torch.randperm(len(fit), generator=gen)]
        for i in range(0, len(perm), 32):
            idx = perm[i:i + 32]
            opt.zero_grad()
            bce(det(x[idx]).squeeze(-1).clamp(1e-7, 1 - 1e-7), y[idx]).backward()
            opt.step()

    @torch.no_grad()
    def accuracy(part):
        pred = (det(x[part]).squeeze(-1) >= 0.5).float()
        return float((pred == y[part]).float().mean())

    return det, accuracy(torch.from_numpy(fit)), accuracy(torch.from_numpy(hold))
