"""Detector-regularized static watermarking with a DNN projection.

The features are a secretly selected subset of the filter-mean weight
vector; a trained projection network maps them to the payload while a
weight discriminator, co-trained GAN-style, pushes the watermarked
weights to stay distributed like clean ones. The discriminator sees
sorted features and its parameters are clamped after every step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from wbmark.checkpoint import Checkpoint
from wbmark.core import BCE_EPS, BitString, ber, derive_rng, hard_threshold
from wbmark.errors import InputError
from wbmark.keybundle import KeyBundle
from wbmark.models import (TrainConfig, batch_indices, checkpoint_to_model,
                           default_watermark_layer, evaluate_accuracy,
                           make_optimizer, state_to_checkpoint, to_tensors)
from wbmark.schemes import common
from wbmark.schemes.uchida import extract_features as uchida_features

DEFAULT_CLAMP = 0.01
DEFAULT_PROJ_WIDTHS = (256, 256)


@dataclass
class RigaKeys:
    layer_index: int
    selection: np.ndarray           # int64 indices into the feature vector
    proj_widths: tuple[int, int]
    seed: int
    payload_bits: int
    proj_state: dict[str, np.ndarray] | None = None

    def selection_matrix(self, total: int) -> np.ndarray:
        """Materialize K_ext as a 0/1 matrix of shape (|w_s|, |w|)."""
        m = np.zeros((self.selection.size, total), dtype=np.float32)
        m[np.arange(self.selection.size), self.selection] = 1.0
        return m

    def to_bundle(self) -> KeyBundle:
        meta = {"layer_index": self.layer_index,
                "selection": [int(i) for i in self.selection],
                "proj_widths": list(self.proj_widths),
                "trained": self.proj_state is not None}
        blobs = {} if self.proj_state is None else {
            f"proj.{k}": v for k, v in self.proj_state.items()}
        return KeyBundle(scheme="riga", rng_seed=self.seed,
                         payload_bits=self.payload_bits, meta=meta, blobs=blobs)

    @classmethod
    def from_bundle(cls, b: KeyBundle) -> "RigaKeys":
        state = {k[len("proj."):]: v for k, v in b.blobs.items() if k.startswith("proj.")}
        return cls(layer_index=int(b.meta["layer_index"]),
                   selection=np.asarray(b.meta["selection"], dtype=np.int64),
                   proj_widths=tuple(b.meta["proj_widths"]), seed=b.rng_seed,
                   payload_bits=b.payload_bits, proj_state=state or None)


class Detector(nn.Module):
    """Binary weight discriminator; outputs P(watermarked)."""

    def __init__(self, n_in: int, hidden: int = 64, clamp_bound: float = DEFAULT_CLAMP):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(n_in, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 1), nn.Sigmoid())
        self.clamp_bound = clamp_bound

    def forward(self, x):
        return self.net(x).squeeze(-1)

    def clamp_(self):
        with torch.no_grad():
            for p in self.parameters():
                p.clamp_(-self.clamp_bound, self.clamp_bound)

    def max_abs_param(self) -> float:
        return max(float(p.abs().max()) for p in self.parameters())


def generate_keys(model, payload_bits: int, seed: int,
                  layer_index: int | None = None, selection_ratio: float = 0.5,
                  proj_widths: tuple[int, int] = DEFAULT_PROJ_WIDTHS) -> RigaKeys:
    if layer_index is None:
        layer_index = default_watermark_layer(model)
    total = uchida_features(model, layer_index).size
    n_sel = max(1, int(round(selection_ratio * total)))
    rng = np.random.default_rng(seed)
    selection = rng.permutation(total)[:n_sel].astype(np.int64)
    return RigaKeys(layer_index=layer_index, selection=selection,
                    proj_widths=tuple(proj_widths), seed=seed,
                    payload_bits=payload_bits)


def extract_features(target, keys: RigaKeys) -> np.ndarray:
    """Secretly selected subvector w_s = w[K_ext], in secret order."""
    w = uchida_features(target, keys.layer_index)
    if keys.selection.max() >= w.size:
        raise InputError(f"selection indices exceed feature size {w.size}")
    return w[keys.selection]


def _build_proj(keys: RigaKeys) -> nn.Sequential:
    widths = [keys.selection.size, *keys.proj_widths, keys.payload_bits]
    proj = common.init_mlp(widths, seed=keys.seed + 1)
    if keys.proj_state is not None:
        common.load_net_state(proj, keys.proj_state)
    return proj


def train_detector(wat_features, clean_features, *, epochs: int = 200,
                   lr: float = 1e-3, clamp_bound: float = DEFAULT_CLAMP,
                   seed: int = 0) -> tuple[Detector, float]:
    """Train the discriminator on sorted feature vectors; returns accuracy.

    wat_features / clean_features: arrays of shape (n, d), labels 1/0.
    """
    wf = np.atleast_2d(np.asarray(wat_features, dtype=np.float32))
    cf = np.atleast_2d(np.asarray(clean_features, dtype=np.float32))
    if wf.size == 0 or cf.size == 0:
        raise InputError("both feature pools must be non-empty")
    if wf.shape[1] != cf.shape[1]:
        raise InputError(f"feature widths differ: {wf.shape[1]} vs {cf.shape[1]}")
    x = torch.from_numpy(np.sort(np.concatenate([wf, cf]), axis=1))
    y = torch.cat([torch.ones(len(wf)), torch.zeros(len(cf))])
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        det = Detector(wf.shape[1], clamp_bound=clamp_bound)
    opt = torch.optim.Adam(det.parameters(), lr=lr)
    bce = nn.BCELoss()
    for _ in range(epochs):
        opt.zero_grad()
        bce(det(x).clamp(BCE_EPS, 1 - BCE_EPS), y).backward()
        opt.step()
        det.clamp_()
    acc = float(((det(x) >= 0.5).float() == y).float().mean())
    return det, acc


def extract(target, keys: RigaKeys) -> BitString:
    if keys.proj_state is None:
        raise InputError("keys carry no trained projection network")
    proj = _build_proj(keys)
    feats = torch.from_numpy(extract_features(target, keys).astype(np.float32))
    with torch.no_grad():
        out = proj(feats)
    return hard_threshold(common.soft_to_numpy(out))


def _surrogate_pool(base_features: np.ndarray, size: int, seed: int) -> np.ndarray:
    """Clean-feature stand-ins: seeded perturbations of the base features."""
    rng = derive_rng(seed, "riga-surrogate")
    scale = max(float(base_features.std()), 1e-4)
    pool = [base_features + rng.normal(0.0, 0.1 * scale, base_features.shape)
            for _ in range(size)]
    return np.stack(pool).astype(np.float32)


def embed(base: Checkpoint, payload: BitString, keys: RigaKeys, train, test, *,
          lambda1: float = 1.0, lambda2: float = 1.0, cfg: TrainConfig | None = None,
          seed: int = 0, surrogate_pool_size: int = 20,
          clamp_bound: float = DEFAULT_CLAMP) -> tuple[Checkpoint, RigaKeys, dict]:
    """Co-train model, projection net and detector; returns trained keys.

    Per training batch: the model minimizes
    E0 + lambda1*E_wat - lambda2*log(1 - F_det(sorted w_s^wat)), the
    projection net minimizes E_wat on detached features, then the
    detector takes one clamped step on (w_s^wat, 1) vs (clean draw, 0).
    """
    if len(payload) != keys.payload_bits:
        raise InputError(f"payload length {len(payload)} != key width {keys.payload_bits}")
    if surrogate_pool_size < 2:
        raise InputError("surrogate_pool_size must be >= 2")
    cfg = cfg or TrainConfig(epochs=5, seed=seed)
    model = checkpoint_to_model(base)
    weight = common.fc_weight(model, keys.layer_index)
    sel = torch.from_numpy(keys.selection)
    target = common.bits_tensor(payload)

    base_feats = extract_features(base, keys)
    clean_const = torch.from_numpy(base_feats.astype(np.float32))
    b_r = common.bits_tensor(BitString.random(keys.payload_bits,
                                              derive_rng(keys.seed, "riga-br")))
    pool = torch.from_numpy(_surrogate_pool(base_feats, surrogate_pool_size, keys.seed))

    proj = _build_proj(replace(keys, proj_state=None))
    with torch.random.fork_rng():
        torch.manual_seed(keys.seed + 2)
        det = Detector(keys.selection.size, clamp_bound=clamp_bound)

    opt = make_optimizer(model.parameters(), cfg)
    proj_opt = torch.optim.Adam(proj.parameters(), lr=1e-3)
    det_opt = torch.optim.Adam(det.parameters(), lr=1e-3)
    bce = nn.BCELoss()
    loss_fn = nn.CrossEntropyLoss()
    x, y = to_tensors(train)
    gen = common.seeded_generator(seed)

    def w_s():
        return common.mean_over_rows(weight)[sel]

    history = {"task_loss": [], "wat_loss": [], "det_acc": [], "ber": []}
    t0 = time.time()
    step = 0
    for _ in range(cfg.epochs):
        model.train()
        task_sum = wat_sum = det_hits = 0.0
        steps = 0
        for idx in batch_indices(len(train), cfg.batch_size, gen):
            # model update under the global loss
            opt.zero_grad()
            task = loss_fn(model(x[idx]), y[idx])
            feats = w_s()
            e_wat = (common.bce_vec(proj(feats), target)
                     + common.bce_vec(proj(clean_const), b_r))
            d_wat = det(torch.sort(feats).values).clamp(BCE_EPS, 1 - BCE_EPS)
            loss = task + lambda1 * e_wat - lambda2 * torch.log(1.0 - d_wat)
            loss.backward()
            opt.step()

            # projection update on detached features
            proj_opt.zero_grad()
            feats_d = w_s().detach()
            (common.bce_vec(proj(feats_d), target)
             + common.bce_vec(proj(clean_const), b_r)).backward()
            proj_opt.step()

            # one detector step per model batch, then clamp
            det_opt.zero_grad()
            clean_draw = pool[step % len(pool)]
            pred_w = det(torch.sort(feats_d).values)
            pred_c = det(torch.sort(clean_draw).values)
            (bce(pred_w.clamp(BCE_EPS, 1 - BCE_EPS), torch.tensor(1.0))
             + bce(pred_c.clamp(BCE_EPS, 1 - BCE_EPS), torch.tensor(0.0))).backward()
            det_opt.step()
            det.clamp_()

            task_sum += float(task.detach())
            wat_sum += float(e_wat.detach())
            det_hits += float(pred_w >= 0.5) + float(pred_c < 0.5)
            steps += 1
            step += 1
        keys_now = replace(keys, proj_state=common.net_state_numpy(proj))
        history["task_loss"].append(task_sum / steps)
        history["wat_loss"].append(wat_sum / steps)
        history["det_acc"].append(det_hits / (2 * steps))
        history["ber"].append(ber(extract(model, keys_now), payload))

    trained = replace(keys, proj_state=common.net_state_numpy(proj))
    final_ber = ber(extract(model, trained), payload)
    acc = evaluate_accuracy(model, test)
    report = {"scheme": "riga", "ber": final_ber, "accuracy": acc,
              "converged": final_ber == 0.0, "epochs": cfg.epochs,
              "lambda1": lambda1, "lambda2": lambda2,
              "detector_accuracy": history["det_acc"][-1] if history["det_acc"] else None,
              "seconds": time.time() - t0, "history": history}
    meta = dict(base.meta)
    meta.update({"watermarked": "riga", "embed_seed": seed})
    return state_to_checkpoint(model, meta), trained, report
