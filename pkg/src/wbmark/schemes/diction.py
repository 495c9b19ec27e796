"""Latent-space dynamic watermarking with a trained projection network.

Trigger inputs are sampled on demand from an input-shaped normal
distribution. During embedding the watermarked model (generator) and a
3-layer projection network (discriminator) are trained in alternation:
the model keeps its task accuracy while driving the projection of its
secretly permuted layer activations toward the payload; the projection
net learns to emit the payload for the watermarked model's activations
and a fixed random string for the frozen original's. Extraction
averages the projection over fresh latent samples and thresholds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from wbmark.checkpoint import Checkpoint
from wbmark.core import (BitString, LatentSpaceSpec, VerificationResult, ber,
                         derive_rng, derive_seed, hard_threshold, verify_payload)
from wbmark.errors import InputError
from wbmark.keybundle import KeyBundle
from wbmark.models import (TrainConfig, batch_indices, checkpoint_to_model,
                           default_watermark_layer, evaluate_accuracy, n_fc_layers,
                           state_to_checkpoint, to_tensors)
from wbmark.schemes import common

DEFAULT_PROJ_WIDTHS = (512, 512)


@dataclass
class DictionKeys:
    layer_index: int
    z_indices: np.ndarray            # injective map m-dim -> m'-dim, secret order
    latent: LatentSpaceSpec
    proj_widths: tuple[int, int]
    payload_bits: int
    seed: int
    proj_state: dict[str, np.ndarray] | None = None

    def z_matrix(self, m: int) -> np.ndarray:
        """Materialize Z as a 0/1 selection-permutation matrix (m, m')."""
        z = np.zeros((m, self.z_indices.size), dtype=np.float32)
        z[self.z_indices, np.arange(self.z_indices.size)] = 1.0
        return z

    def to_bundle(self) -> KeyBundle:
        meta = {"layer_index": self.layer_index,
                "z_indices": [int(i) for i in self.z_indices],
                "proj_widths": list(self.proj_widths),
                "trained": self.proj_state is not None}
        blobs = {} if self.proj_state is None else {
            f"proj.{k}": v for k, v in self.proj_state.items()}
        return KeyBundle(scheme="diction", rng_seed=self.seed,
                         payload_bits=self.payload_bits, latent_spec=self.latent,
                         meta=meta, blobs=blobs)

    @classmethod
    def from_bundle(cls, b: KeyBundle) -> "DictionKeys":
        state = {k[len("proj."):]: v for k, v in b.blobs.items() if k.startswith("proj.")}
        return cls(layer_index=int(b.meta["layer_index"]),
                   z_indices=np.asarray(b.meta["z_indices"], dtype=np.int64),
                   latent=b.latent_spec, proj_widths=tuple(b.meta["proj_widths"]),
                   payload_bits=b.payload_bits, seed=b.rng_seed,
                   proj_state=state or None)


@dataclass
class DictionHyper:
    lam: float = 1.0
    epochs: int = 30
    batch_size: int = 128
    model_lr: float = 1e-4
    proj_lr: float = 1e-3
    proj_weight_decay: float = 1e-4
    latent_per_step: int = 100
    extract_samples: int = 100

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.latent_per_step,
               self.extract_samples) < 1 or min(self.model_lr, self.proj_lr) <= 0:
            raise InputError(f"invalid diction hyperparameters {self}")


def generate_keys(model, payload_bits: int, seed: int, layer_index: int | None = None,
                  *, z_ratio: float = 1.0, latent_mean: float = 0.0,
                  latent_std: float = 1.0,
                  proj_widths: tuple[int, int] = DEFAULT_PROJ_WIDTHS) -> DictionKeys:
    if layer_index is None:
        layer_index = default_watermark_layer(model)
    if not (0.0 < z_ratio <= 1.0):
        raise InputError(f"z_ratio must lie in (0, 1], got {z_ratio}")
    with torch.no_grad():
        probe = torch.zeros((1, *model.input_shape))
        m = model.forward_with_preacts(probe)[1][layer_index].shape[1]
    n_sel = max(1, int(round(z_ratio * m)))
    rng = np.random.default_rng(seed)
    z = rng.permutation(m)[:n_sel].astype(np.int64)
    latent = LatentSpaceSpec(latent_mean, latent_std, tuple(model.input_shape))
    return DictionKeys(layer_index=layer_index, z_indices=z, latent=latent,
                       proj_widths=tuple(proj_widths), payload_bits=payload_bits,
                       seed=seed)


def sample_latent(spec: LatentSpaceSpec, count: int,
                  generator: torch.Generator) -> torch.Tensor:
    """count i.i.d. N(mean, std) trigger tensors of the latent sample shape."""
    if count < 1:
        raise InputError("count must be >= 1")
    draw = torch.randn((count, *spec.sample_shape), generator=generator)
    return draw * spec.std + spec.mean


def extract_features(model, trigger: torch.Tensor, keys: DictionKeys,
                     grad: bool = False) -> torch.Tensor:
    """Pre-activation maps of layer l, secretly permuted/selected by Z."""
    if tuple(trigger.shape[1:]) != tuple(model.input_shape):
        raise InputError(f"trigger shape {tuple(trigger.shape[1:])} does not match "
                         f"model input {model.input_shape}")
    idx = torch.from_numpy(keys.z_indices)
    if grad:
        _, pre = model.forward_with_preacts(trigger)
        return pre[keys.layer_index][:, idx]
    with torch.no_grad():
        _, pre = model.forward_with_preacts(trigger)
        return pre[keys.layer_index][:, idx]


def _build_proj(keys: DictionKeys) -> torch.nn.Sequential:
    widths = [keys.z_indices.size, *keys.proj_widths, keys.payload_bits]
    proj = common.init_mlp(widths, seed=derive_seed(keys.seed, "diction-proj-init"))
    if keys.proj_state is not None:
        common.load_net_state(proj, keys.proj_state)
    return proj


def wat_loss(proj, feats_wat: torch.Tensor, feats_orig: torch.Tensor,
             payload: torch.Tensor, b_r: torch.Tensor) -> torch.Tensor:
    """BCE(proj(wat), b) + BCE(proj(orig), b_r), row-summed, batch-averaged."""
    if payload.shape != b_r.shape:
        raise InputError(f"payload/b_r length mismatch: {tuple(payload.shape)} "
                         f"vs {tuple(b_r.shape)}")
    return (common.bce_rows(proj(feats_wat), payload)
            + common.bce_rows(proj(feats_orig), b_r))


def random_counterpart(keys: DictionKeys) -> BitString:
    """The fixed random string b_r the projection emits for the original model."""
    return BitString.random(keys.payload_bits, derive_rng(keys.seed, "diction-br"))


def embed(base: Checkpoint, payload: BitString, keys: DictionKeys, train, test, *,
          hyper: DictionHyper | None = None, seed: int = 0,
          ) -> tuple[Checkpoint, DictionKeys, dict]:
    """GAN-style alternation per training batch.

    Model step: E0(batch) + lam * BCE(proj(Ext(M_wat, LS)), b), fresh
    latent samples, projection frozen. Projection step: lam *
    BCE(proj(Ext(M_wat, LS')), b) + BCE(proj(Ext(M, LS')), b_r) on fresh
    samples with the model detached; the frozen original M is kept only
    during embedding. Latent feature passes run in eval mode so
    batch-norm statistics match extraction-time behavior.
    """
    if len(payload) != keys.payload_bits:
        raise InputError(f"payload length {len(payload)} != key width {keys.payload_bits}")
    hyper = hyper or DictionHyper()
    model = checkpoint_to_model(base)
    orig = checkpoint_to_model(base)
    orig.eval()
    for p in orig.parameters():
        p.requires_grad_(False)

    proj = _build_proj(replace(keys, proj_state=None))
    target = common.bits_tensor(payload)
    b_r = common.bits_tensor(random_counterpart(keys))

    model_opt = torch.optim.Adam(model.parameters(), lr=hyper.model_lr)
    proj_opt = torch.optim.Adam(proj.parameters(), lr=hyper.proj_lr,
                                weight_decay=hyper.proj_weight_decay)
    loss_fn = torch.nn.CrossEntropyLoss()
    x, y = to_tensors(train)
    gen = common.seeded_generator(seed)
    latent_gen = common.seeded_generator(derive_seed(seed, "diction-latent"))

    history = {"task_loss": [], "wat_loss": [], "proj_loss": [], "ber": []}
    t0 = time.time()
    for _ in range(hyper.epochs):
        task_sum = wat_sum = proj_sum = 0.0
        steps = 0
        for idx in batch_indices(len(train), hyper.batch_size, gen):
            # model update: task loss + payload term through frozen proj
            model_opt.zero_grad()
            model.train()
            task = loss_fn(model(x[idx]), y[idx])
            model.eval()
            ls = sample_latent(keys.latent, hyper.latent_per_step, latent_gen)
            feats = extract_features(model, ls, keys, grad=True)
            wat = common.bce_rows(proj(feats), target)
            (task + hyper.lam * wat).backward()
            model_opt.step()

            # projection update on fresh latent samples, model detached
            proj_opt.zero_grad()
            ls2 = sample_latent(keys.latent, hyper.latent_per_step, latent_gen)
            with torch.no_grad():
                f_wat = extract_features(model, ls2, keys)
                f_orig = extract_features(orig, ls2, keys)
            p_loss = (hyper.lam * common.bce_rows(proj(f_wat), target)
                      + common.bce_rows(proj(f_orig), b_r))
            p_loss.backward()
            proj_opt.step()

            task_sum += float(task.detach())
            wat_sum += float(wat.detach())
            proj_sum += float(p_loss.detach())
            steps += 1
        keys_now = replace(keys, proj_state=common.net_state_numpy(proj))
        history["task_loss"].append(task_sum / steps)
        history["wat_loss"].append(wat_sum / steps)
        history["proj_loss"].append(proj_sum / steps)
        history["ber"].append(ber(
            extract(model, keys_now, n_samples=hyper.extract_samples), payload))

    trained = replace(keys, proj_state=common.net_state_numpy(proj))
    final_ber = ber(extract(model, trained, n_samples=hyper.extract_samples), payload)
    acc = evaluate_accuracy(model, test)
    report = {"scheme": "diction", "ber": final_ber, "accuracy": acc,
              "converged": final_ber == 0.0, "epochs": hyper.epochs,
              "lambda": hyper.lam, "seconds": time.time() - t0, "history": history}
    meta = dict(base.meta)
    meta.update({"watermarked": "diction", "embed_seed": seed})
    return state_to_checkpoint(model, meta), trained, report


def extract(target, keys: DictionKeys, n_samples: int = 100,
            seed: int | None = None) -> BitString:
    """Threshold the mean projection over n_samples fresh latent draws."""
    if keys.proj_state is None:
        raise InputError("keys carry no trained projection network")
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    model = checkpoint_to_model(target) if isinstance(target, Checkpoint) else target
    model.eval()
    proj = _build_proj(keys)
    if seed is None:
        seed = derive_seed(keys.seed, "diction-extract")
    gen = common.seeded_generator(seed)
    ls = sample_latent(keys.latent, n_samples, gen)
    with torch.no_grad():
        feats = extract_features(model, ls, keys)
        mean_proj = proj(feats).mean(dim=0)
    return hard_threshold(common.soft_to_numpy(mean_proj))


def verify(target, keys: DictionKeys, payload: BitString, threshold: float = 0.0,
           n_samples: int = 100, seed: int | None = None) -> VerificationResult:
    """Extract, compare to the reference payload, decide ownership."""
    extracted = extract(target, keys, n_samples=n_samples, seed=seed)
    return verify_payload(extracted, payload, threshold)
