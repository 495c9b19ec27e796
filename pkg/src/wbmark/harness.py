"""Config-driven experiment runner with a cached, content-addressed
results store.

Each experiment config hashes to a directory under its output root:

    <output_dir>/<confighash>/
        manifest.json     stage statuses (done / cached)
        record.json       the results record
        reps/r<k>/        checkpoints, keys, payload per repetition

Repetition k derives its seed from hash(master_seed, k), so adding
repetitions never changes earlier ones. Rerunning an unchanged config
reuses everything.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from wbmark import attacks, schemes
from wbmark.checkpoint import Checkpoint
from wbmark.core import BitString, ber, derive_rng, derive_seed
from wbmark.data import ingest_dataset
from wbmark.errors import InputError
from wbmark.models import BENCHMARKS, TrainConfig, evaluate_accuracy, train_baseline

_ATTACK_KINDS = ("prune", "prune_sweep", "finetune", "overwrite", "distribution", "pia")


@dataclass
class ExperimentConfig:
    benchmark_id: int
    scheme: str | None = None
    payload_bits: int = 256
    repetitions: int = 1
    master_seed: int = 0
    output_dir: str = "results"
    dataset_root: str | None = None
    tag: str = ""
    baseline: dict = field(default_factory=dict)   # TrainConfig fields or {"checkpoint": path}
    scheme_params: dict = field(default_factory=dict)
    embed_params: dict = field(default_factory=dict)
    attacks: list = field(default_factory=list)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        raw = json.loads(Path(path).read_text())
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise InputError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    def validate(self) -> list[str]:
        problems = []
        if self.benchmark_id not in BENCHMARKS:
            problems.append(f"benchmark_id must be one of {sorted(BENCHMARKS)}")
        if self.scheme is not None and self.scheme not in schemes.scheme_names():
            problems.append(f"scheme must be one of {schemes.scheme_names()}")
        if self.payload_bits < 1:
            problems.append("payload_bits must be > 0")
        if self.repetitions < 1:
            problems.append("repetitions must be >= 1")
        for atk in self.attacks:
            kind = atk.get("kind")
            if kind not in _ATTACK_KINDS:
                problems.append(f"unknown attack kind {kind!r}")
            if kind in ("prune_sweep", "finetune", "overwrite", "distribution") \
                    and self.scheme is None:
                problems.append(f"attack {kind!r} needs an embedding scheme")
        ckpt = self.baseline.get("checkpoint")
        if ckpt is not None and not Path(ckpt).is_dir():
            problems.append(f"referenced baseline checkpoint {ckpt!r} does not exist")
        sub = self.baseline.get("from_config")
        if sub is not None and not Path(sub).is_file():
            problems.append(f"referenced baseline config {sub!r} does not exist")
        return problems

    def canonical(self) -> dict:
        """Config content that identifies the experiment (storage paths excluded)."""
        d = asdict(self)
        d.pop("output_dir")
        d.pop("dataset_root")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _env_fingerprint() -> dict:
    return {"python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__, "platform": platform.platform(),
            "torch_threads": torch.get_num_threads()}


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    os.replace(tmp, path)


def metrics_view(record: dict) -> dict:
    """The deterministic part of a record: everything except timing/env."""

    def strip(obj):
        if isinstance(obj, dict):
            return {k: strip(v) for k, v in sorted(obj.items())
                    if k not in ("seconds", "timing", "timestamps", "env")}
        if isinstance(obj, list):
            return [strip(v) for v in obj]
        return obj

    return strip({"repetitions": record["repetitions"], "aggregate": record["aggregate"]})


def metrics_fingerprint(record: dict) -> str:
    blob = json.dumps(metrics_view(record), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class _Manifest:
    def __init__(self, path: Path):
        self.path = path
        self.stages: list[dict] = []
        if path.is_file():
            self.stages = json.loads(path.read_text()).get("stages", [])

    def mark(self, name: str, status: str, artifact: str | None = None):
        self.stages = [s for s in self.stages if s["name"] != name]
        self.stages.append({"name": name, "status": status, "artifact": artifact})
        _write_json(self.path, {"stages": self.stages})

    def mark_all_cached(self):
        for s in self.stages:
            s["status"] = "cached"
        _write_json(self.path, {"stages": self.stages})


def _baseline_for_rep(config: ExperimentConfig, rep_dir: Path, seed: int,
                      train, test, manifest: _Manifest, rep: int) -> Checkpoint:
    stage = f"rep{rep}:baseline"
    sub = config.baseline.get("from_config")
    if sub is not None:
        sub_config = ExperimentConfig.from_json(sub)
        if sub_config.scheme is not None or sub_config.baseline.get("from_config"):
            raise InputError(f"baseline config {sub} must be a plain baseline run")
        sub_record = run_experiment(sub_config)
        path = (Path(sub_config.output_dir) / sub_record["config_hash"]
                / "reps" / "r0" / "baseline")
        manifest.mark(stage, "referenced", str(path))
        return Checkpoint.load(path)
    ref = config.baseline.get("checkpoint")
    if ref is not None:
        manifest.mark(stage, "referenced", ref)
        return Checkpoint.load(ref)
    out = rep_dir / "baseline"
    if (out / "manifest.json").is_file():
        manifest.mark(stage, "cached", str(out))
        return Checkpoint.load(out)
    bench = BENCHMARKS[config.benchmark_id]
    fields = {k: v for k, v in config.baseline.items() if k != "checkpoint"}
    fields.setdefault("epochs", bench.default_epochs)
    cfg = TrainConfig(seed=seed, **fields)
    ckpt = train_baseline(bench, train, test, cfg)
    ckpt.save(out)
    manifest.mark(stage, "done", str(out))
    return ckpt


def _run_attack(atk: dict, ctx: dict) -> dict:
    kind = atk["kind"]
    params = {k: v for k, v in atk.items() if k != "kind"}
    t0 = time.time()
    if kind == "prune":
        pruned = attacks.prune(ctx["wat"], params["alpha"])
        out = {"kind": kind, "alpha": params["alpha"],
               "accuracy": evaluate_accuracy(pruned, ctx["test"]),
               "ber": ber(schemes.extract(ctx["keys"], pruned, train=ctx["train"]),
                          ctx["payload"])}
    elif kind == "prune_sweep":
        out = attacks.prune_sweep(ctx["wat"], ctx["keys"], ctx["payload"],
                                  params.get("alphas", list(range(0, 100, 10)) + [99]),
                                  ctx["test"], ctx["train"])
    elif kind == "finetune":
        epochs = int(params.get("epochs", 50))
        snaps = attacks.finetune_attack(ctx["wat"], ctx["train"], epochs,
                                        record_epochs=params.get("record_epochs"),
                                        seed=derive_seed(ctx["seed"], "attack-finetune"))
        entries = []
        for ep in sorted(snaps):
            snap = snaps[ep]
            entries.append({"epoch": ep,
                            "accuracy": evaluate_accuracy(snap, ctx["test"]),
                            "ber": ber(schemes.extract(ctx["keys"], snap,
                                                       train=ctx["train"]),
                                       ctx["payload"])})
        out = {"kind": kind, "epochs": epochs, "entries": entries}
    elif kind == "overwrite":
        bits = int(params.get("payload_bits", len(ctx["payload"])))
        res = attacks.overwrite_attack(
            ctx["wat"], ctx["scheme"], bits,
            attacker_seed=int(params.get("attacker_seed",
                                         derive_seed(ctx["seed"], "attacker"))),
            train=ctx["train"], test=ctx["test"],
            scheme_params=params.get("scheme_params"),
            embed_params=params.get("embed_params") or ctx.get("embed_params"))
        attacked = res["checkpoint"]
        out = {"kind": kind, "payload_bits": bits,
               "owner_ber": ber(schemes.extract(ctx["keys"], attacked,
                                                train=ctx["train"]), ctx["payload"]),
               "attacker_ber": res["attacker_ber"],
               "accuracy": res["attacker_accuracy"]}
    elif kind == "distribution":
        layer = params.get("layer_index", ctx["keys"].layer_index)
        out = attacks.distribution_report(ctx["wat"], ctx["base"], layer, ctx["test"],
                                          bins=int(params.get("bins", 100)))
    elif kind == "pia":
        pool = attacks.pia_generate_pool(
            ctx["train"], ctx["test"],
            n_watermarked=int(params.get("n_watermarked", 60)),
            n_clean=int(params.get("n_clean", 60)),
            scheme=params.get("scheme", ctx.get("scheme") or "diction"),
            arch=params.get("arch", "lenet_small"),
            seed=derive_seed(ctx["seed"], "pia"),
            train_epochs=int(params.get("train_epochs", 3)),
            subset_size=int(params.get("subset_size", 12000)),
            embed_epochs=int(params.get("embed_epochs", 2)),
            payload_bits=int(params.get("payload_bits", 256)),
            accuracy_floor=float(params.get("accuracy_floor", 0.95)),
            log=ctx.get("log"))
        _, train_acc, test_acc = attacks.pia_train_detector(
            pool, holdout_fraction=float(params.get("holdout_fraction", 0.25)),
            epochs=int(params.get("detector_epochs", 50)),
            seed=derive_seed(ctx["seed"], "pia-detector"))
        out = {"kind": kind, "pool_size": len(pool.labels),
               "excluded": len(pool.meta["excluded"]),
               "detector_train_accuracy": train_acc,
               "detector_test_accuracy": test_acc}
    else:
        raise InputError(f"unknown attack kind {kind!r}")
    out.setdefault("seconds", time.time() - t0)
    return out


def _run_repetition(config: ExperimentConfig, rep: int, run_dir: Path,
                    train, test, manifest: _Manifest, log=None) -> dict:
    rep_dir = run_dir / "reps" / f"r{rep}"
    rep_file = rep_dir / "metrics.json"
    if rep_file.is_file():
        manifest.mark(f"rep{rep}", "cached", str(rep_dir))
        return json.loads(rep_file.read_text())
    rep_dir.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(config.master_seed, "rep", rep)
    result: dict = {"repetition": rep, "seed": seed, "timing": {}}

    needs_baseline = (config.scheme is not None
                      or any(a.get("kind") != "pia" for a in config.attacks)
                      or not config.attacks)
    base = None
    if needs_baseline:
        t0 = time.time()
        base = _baseline_for_rep(config, rep_dir, seed, train, test, manifest, rep)
        result["baseline_accuracy"] = (base.meta.get("final_accuracy")
                                       or evaluate_accuracy(base, test))
        result["timing"]["baseline"] = time.time() - t0

    ctx = {"base": base, "train": train, "test": test, "seed": seed,
           "scheme": config.scheme, "log": log,
           "embed_params": config.embed_params or None}
    if config.scheme is not None:
        payload = BitString.random(config.payload_bits, derive_rng(seed, "payload"))
        (rep_dir / "payload.txt").write_text(payload.to01() + "\n")
        from wbmark.models import checkpoint_to_model
        model = checkpoint_to_model(base)
        keys = schemes.generate_keys(config.scheme, model, config.payload_bits,
                                     seed=derive_seed(seed, "keys"), train=train,
                                     **config.scheme_params)
        t0 = time.time()
        wat, keys, report = schemes.embed(config.scheme, base, payload, keys,
                                          train, test,
                                          seed=derive_seed(seed, "embed"),
                                          **config.embed_params)
        result["timing"]["embed"] = time.time() - t0
        wat.save(rep_dir / "watermarked")
        schemes.save_keys(keys, rep_dir / "keys.json")
        manifest.mark(f"rep{rep}:embed", "done", str(rep_dir / "watermarked"))
        history = report.pop("history", None)
        report.pop("seconds", None)
        result["embed"] = report
        result["ber"] = report["ber"]
        result["wat_accuracy"] = report["accuracy"]
        if history:
            result["embed_history"] = history
        ctx.update({"wat": wat, "keys": keys, "payload": payload})

    result["attacks"] = []
    for i, atk in enumerate(config.attacks):
        if log:
            log(f"rep {rep}: attack {atk.get('kind')}")
        t0 = time.time()
        out = _run_attack(atk, ctx)
        out["seconds"] = time.time() - t0
        result["attacks"].append(out)
        manifest.mark(f"rep{rep}:attack{i}:{atk.get('kind')}", "done", None)

    _write_json(rep_file, result)
    manifest.mark(f"rep{rep}", "done", str(rep_dir))
    return result


def _aggregate(reps: list[dict]) -> dict:
    agg: dict = {"repetitions": len(reps)}

    def mean_of(key):
        vals = [r[key] for r in reps if key in r]
        return float(np.mean(vals)) if vals else None

    for key, name in (("baseline_accuracy", "baseline_acc_mean"),
                      ("wat_accuracy", "acc_mean"), ("ber", "ber_mean")):
        v = mean_of(key)
        if v is not None:
            agg[name] = v
    return agg


def run_experiment(config: ExperimentConfig, force: bool = False, log=None) -> dict:
    """Execute (or reuse) an experiment; returns the results record."""
    problems = config.validate()
    if problems:
        raise InputError("invalid config: " + "; ".join(problems))
    run_dir = Path(config.output_dir) / config.config_hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    record_path = run_dir / "record.json"
    manifest = _Manifest(run_dir / "manifest.json")
    if record_path.is_file() and not force:
        manifest.mark_all_cached()
        if log:
            log(f"cache hit: {record_path}")
        return json.loads(record_path.read_text())

    bench = BENCHMARKS[config.benchmark_id]
    train, test = ingest_dataset(bench.dataset, config.dataset_root)
    started = time.time()
    reps = [_run_repetition(config, r, run_dir, train, test, manifest, log=log)
            for r in range(config.repetitions)]
    record = {
        "config": asdict(config),
        "config_hash": config.config_hash(),
        "repetitions": reps,
        "aggregate": _aggregate(reps),
        "env": _env_fingerprint(),
        "timestamps": {"started": started, "finished": time.time()},
    }
    record["metrics_fingerprint"] = metrics_fingerprint(record)
    _write_json(record_path, record)
    return record
