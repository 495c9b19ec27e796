"""Dynamic watermarking in the activation maps of a hidden layer.

The training set's pre-activation maps are clustered with a diagonal
GMM (one component per task class); a secret subset T of components
carries the watermark. Trigger samples are those whose GMM assignment
and training label both fall in T. Per-class parameter vectors theta_i,
initialized at the component means, are trained so that
sigmoid(theta_i @ A) encodes the class payload while staying tethered
to the trigger activation means and repelled from non-selected means.
Extraction projects the per-class trigger activation means through A.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from wbmark.checkpoint import Checkpoint
from wbmark.core import BitString, ber, derive_rng, hard_threshold
from wbmark.errors import InputError, SelectionError
from wbmark.gmm import GmmModel, fit_gmm
from wbmark.keybundle import KeyBundle
from wbmark.models import (TrainConfig, activation_maps, batch_indices,
                           checkpoint_to_model, default_watermark_layer,
                           evaluate_accuracy, make_optimizer,
                           state_to_checkpoint, to_tensors)
from wbmark.schemes import common
from wbmark.schemes.uchida import project as project_through_matrix

DEFAULT_FRACTION = 0.01


@dataclass
class TriggerSelection:
    indices: np.ndarray      # int64 into the canonical train ordering
    labels: np.ndarray       # training labels of the selected samples
    classes: tuple[int, ...]  # T
    fraction: float

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass
class DeepSignsKeys:
    layer_index: int
    matrix: np.ndarray               # A: (m, N), shared across classes
    classes: tuple[int, ...]         # T, ascending
    trigger_indices: np.ndarray      # int64 into canonical train order
    trigger_labels: np.ndarray
    lambda1: float
    lambda2: float
    seed: int
    payloads: np.ndarray | None = None  # (s, N) rows aligned with classes

    @property
    def payload_bits(self) -> int:
        return int(self.matrix.shape[1] * len(self.classes))

    def to_bundle(self) -> KeyBundle:
        meta = {"layer_index": self.layer_index,
                "classes": [int(c) for c in self.classes],
                "trigger_indices": [int(i) for i in self.trigger_indices],
                "trigger_labels": [int(i) for i in self.trigger_labels],
                "lambda1": self.lambda1, "lambda2": self.lambda2,
                "has_payloads": self.payloads is not None}
        blobs = {"matrix": self.matrix}
        if self.payloads is not None:
            blobs["payloads"] = self.payloads.astype(np.float32)
        return KeyBundle(scheme="deepsigns", rng_seed=self.seed,
                         payload_bits=self.payload_bits, meta=meta, blobs=blobs)

    @classmethod
    def from_bundle(cls, b: KeyBundle) -> "DeepSignsKeys":
        payloads = b.blobs.get("payloads")
        return cls(layer_index=int(b.meta["layer_index"]), matrix=b.blobs["matrix"],
                   classes=tuple(b.meta["classes"]),
                   trigger_indices=np.asarray(b.meta["trigger_indices"], dtype=np.int64),
                   trigger_labels=np.asarray(b.meta["trigger_labels"], dtype=np.int64),
                   lambda1=float(b.meta["lambda1"]), lambda2=float(b.meta["lambda2"]),
                   seed=b.rng_seed,
                   payloads=None if payloads is None else payloads.astype(np.uint8))


def collect_activations(model, layer_index: int, images: torch.Tensor) -> np.ndarray:
    """Pre-activation maps of layer `layer_index` as a (N, m) float array."""
    return activation_maps(model, layer_index, images).values.numpy()


def fit_activation_gmm(model, layer_index: int, images: torch.Tensor, n_components: int,
                       seed: int, max_iter: int = 100, tol: float = 1e-4) -> GmmModel:
    if n_components < 1:
        raise InputError("n_components must be >= 1")
    acts = collect_activations(model, layer_index, images)
    return fit_gmm(acts, n_components, seed=seed, max_iter=max_iter, tol=tol)


def select_trigger_set(gmm: GmmModel, activations: np.ndarray, labels: np.ndarray,
                       classes, fraction: float, rng: np.random.Generator,
                       ) -> TriggerSelection:
    """Samples whose GMM assignment and training label both lie in T,
    subsampled to `fraction` of the set with every class represented."""
    classes = tuple(sorted(int(c) for c in classes))
    if not classes:
        raise SelectionError("T must contain at least one component index")
    if any(c < 0 or c >= gmm.n_components for c in classes):
        raise SelectionError(f"T {classes} outside component range [0, {gmm.n_components})")
    labels = np.asarray(labels, dtype=np.int64)
    assignments = gmm.predict(activations)
    in_t = np.isin(assignments, classes) & np.isin(labels, classes)
    eligible = np.nonzero(in_t)[0]
    if eligible.size == 0:
        raise SelectionError(
            f"no sample satisfies both membership conditions for T={classes}; "
            "try a different component subset")
    target = max(len(classes), int(np.floor(fraction * labels.size)))
    picked: list[np.ndarray] = []
    for c in classes:
        members = eligible[labels[eligible] == c]
        if members.size == 0:
            raise SelectionError(
                f"class {c} has no eligible trigger sample; try a different T")
        share = max(1, int(round(target * members.size / eligible.size)))
        share = min(share, members.size)
        picked.append(rng.choice(members, size=share, replace=False))
    indices = np.sort(np.concatenate(picked)).astype(np.int64)
    return TriggerSelection(indices=indices, labels=labels[indices],
                            classes=classes, fraction=fraction)


def generate_keys(model, payload_bits: int, seed: int, layer_index: int | None = None,
                  *, train=None, n_classes: int = 2, fraction: float = DEFAULT_FRACTION,
                  n_components: int = 10, lambda1: float = 1.0, lambda2: float = 1.0,
                  gmm: GmmModel | None = None) -> tuple[DeepSignsKeys, GmmModel]:
    """Fit the GMM, draw the secret component subset T and the trigger set.

    Returns (keys, gmm); the fitted mixture is reused by `embed` to
    initialize the per-class vectors and the non-selected means.
    """
    if train is None:
        raise InputError("deepsigns key generation needs the training split")
    if payload_bits % n_classes != 0:
        raise InputError(f"payload length {payload_bits} not divisible by s={n_classes}")
    if layer_index is None:
        layer_index = default_watermark_layer(model)
    images, labels = to_tensors(train)
    acts = collect_activations(model, layer_index, images)
    if gmm is None:
        gmm = fit_gmm(acts, n_components, seed=seed)
    rng = derive_rng(seed, "deepsigns-keys")
    n_bits_per_class = payload_bits // n_classes
    m = acts.shape[1]
    matrix = rng.standard_normal((m, n_bits_per_class)).astype(np.float32)
    # Retry a few secret subsets if the membership conditions come up empty.
    last_err: SelectionError | None = None
    for _ in range(10):
        classes = tuple(sorted(rng.choice(gmm.n_components, size=n_classes, replace=False)))
        try:
            sel = select_trigger_set(gmm, acts, labels.numpy(), classes, fraction, rng)
            break
        except SelectionError as e:
            last_err = e
    else:
        raise last_err
    keys = DeepSignsKeys(layer_index=layer_index, matrix=matrix, classes=sel.classes,
                         trigger_indices=sel.indices, trigger_labels=sel.labels,
                         lambda1=lambda1, lambda2=lambda2, seed=seed)
    return keys, gmm


def extract_feature_sets(model, keys: DeepSignsKeys, train) -> dict[int, torch.Tensor]:
    """Per-class activation sets {Ext^i}: trigger activations grouped by label."""
    images, _ = to_tensors(train)
    trig = images[torch.from_numpy(keys.trigger_indices)]
    acts = activation_maps(model, keys.layer_index, trig).values
    sets = {}
    for c in keys.classes:
        mask = torch.from_numpy(keys.trigger_labels == c)
        if int(mask.sum()) == 0:
            raise InputError(f"trigger class {c} has no samples")
        sets[c] = acts[mask]
    return sets


def losses(theta: dict[int, torch.Tensor], matrix: torch.Tensor,
           payload_rows: dict[int, torch.Tensor], acts: dict[int, torch.Tensor],
           nonselected_means: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(E_wat, E_sep) for the current per-class vectors.

    E_wat sums, over selected classes, the payload cross entropy of
    sigmoid(theta_i @ A) plus the squared tether to the class's trigger
    activation mean. E_sep sums plain Euclidean distances between each
    theta_i and every non-selected component mean.
    """
    e_wat = torch.zeros(())
    for c, th in theta.items():
        tether = ((th - acts[c].mean(dim=0)) ** 2).sum()
        e_wat = e_wat + common.bce_logits_vec(th @ matrix, payload_rows[c]) + tether
    e_sep = torch.zeros(())
    if nonselected_means.shape[0]:
        for th in theta.values():
            e_sep = e_sep + torch.linalg.vector_norm(
                th[None, :] - nonselected_means, dim=1).sum()
    return e_wat, e_sep


def _payload_rows(keys: DeepSignsKeys, payload: BitString) -> dict[int, torch.Tensor]:
    n = keys.matrix.shape[1]
    rows = payload.bits.reshape(len(keys.classes), n)
    return {c: torch.from_numpy(rows[k].astype(np.float32))
            for k, c in enumerate(keys.classes)}


def embed(base: Checkpoint, payload: BitString, keys: DeepSignsKeys, train, test, *,
          cfg: TrainConfig | None = None, seed: int = 0,
          gmm: GmmModel | None = None, trigger_batch: int = 256,
          ) -> tuple[Checkpoint, DeepSignsKeys, dict]:
    """Fine-tune over the full training set under E0 + l1*E_wat - l2*E_sep.

    The per-class vectors theta_i start at the fitted component means;
    non-selected means stay frozen at their fitted values. A nonzero
    final BER (the small-layer capacity limit) is reported, not raised.
    """
    if len(payload) != keys.payload_bits:
        raise InputError(f"payload length {len(payload)} != key capacity {keys.payload_bits}")
    cfg = cfg or TrainConfig(epochs=10, seed=seed)
    model = checkpoint_to_model(base)
    if gmm is None:
        images, _ = to_tensors(train)
        acts = collect_activations(model, keys.layer_index, images)
        gmm = fit_gmm(acts, 10, seed=keys.seed)

    matrix = torch.from_numpy(keys.matrix.astype(np.float32))
    payload_rows = _payload_rows(keys, payload)
    theta = {c: torch.nn.Parameter(torch.from_numpy(gmm.means[c].astype(np.float32)))
             for c in keys.classes}
    nonsel = np.array([gmm.means[j] for j in range(gmm.n_components)
                       if j not in keys.classes], dtype=np.float32)
    nonsel = torch.from_numpy(nonsel if nonsel.size else nonsel.reshape(0, keys.matrix.shape[0]))

    x, y = to_tensors(train)
    trig_x = x[torch.from_numpy(keys.trigger_indices)]
    trig_class_idx = {c: np.nonzero(keys.trigger_labels == c)[0] for c in keys.classes}

    opt = make_optimizer(list(model.parameters()) + list(theta.values()), cfg)
    loss_fn = torch.nn.CrossEntropyLoss()
    gen = common.seeded_generator(seed)
    rng = derive_rng(seed, "deepsigns-trigger-batches")
    trained = replace(keys, payloads=payload.bits.reshape(len(keys.classes), -1).copy())

    history = {"task_loss": [], "wat_loss": [], "sep_loss": [], "ber": []}
    t0 = time.time()
    for _ in range(cfg.epochs):
        task_sum = wat_sum = sep_sum = 0.0
        steps = 0
        for idx in batch_indices(len(train), cfg.batch_size, gen):
            opt.zero_grad()
            model.train()
            task = loss_fn(model(x[idx]), y[idx])
            # trigger activations in eval mode: extraction-time semantics
            model.eval()
            acts = {}
            for c in keys.classes:
                members = trig_class_idx[c]
                if members.size > trigger_batch:
                    members = rng.choice(members, size=trigger_batch, replace=False)
                _, pre = model.forward_with_preacts(trig_x[torch.from_numpy(members)])
                acts[c] = pre[keys.layer_index]
            e_wat, e_sep = losses(theta, matrix, payload_rows, acts, nonsel)
            (task + keys.lambda1 * e_wat - keys.lambda2 * e_sep).backward()
            opt.step()
            task_sum += float(task.detach())
            wat_sum += float(e_wat.detach())
            sep_sum += float(e_sep.detach())
            steps += 1
        history["task_loss"].append(task_sum / steps)
        history["wat_loss"].append(wat_sum / steps)
        history["sep_loss"].append(sep_sum / steps)
        history["ber"].append(ber(extract(model, trained, train), payload))
    final_ber = ber(extract(model, trained, train), payload)
    acc = evaluate_accuracy(model, test)
    report = {"scheme": "deepsigns", "ber": final_ber, "accuracy": acc,
              "converged": final_ber == 0.0, "epochs": cfg.epochs,
              "lambda1": keys.lambda1, "lambda2": keys.lambda2,
              "trigger_size": int(keys.trigger_indices.size),
              "seconds": time.time() - t0, "history": history}
    meta = dict(base.meta)
    meta.update({"watermarked": "deepsigns", "embed_seed": seed})
    return state_to_checkpoint(model, meta), trained, report


def extract(target, keys: DeepSignsKeys, train) -> BitString:
    """Mean trigger activation per class, projected through A, thresholded,
    concatenated in ascending class order."""
    model = checkpoint_to_model(target) if isinstance(target, Checkpoint) else target
    sets = extract_feature_sets(model, keys, train)
    chunks = []
    for c in keys.classes:
        mean = sets[c].mean(dim=0).numpy().astype(np.float64)
        chunks.append(hard_threshold(project_through_matrix(mean, keys.matrix)).bits)
    return BitString(np.concatenate(chunks))
