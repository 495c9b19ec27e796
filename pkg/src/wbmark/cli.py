"""Command-line interface.

Subcommands: train, embed, extract, verify,
attack {prune|finetune|overwrite|pia|dist}, run, report.

Exit status 0 on success, 1 with a machine-parsable ``error: ...`` line
on stderr for toolkit failures, 2 for usage errors (argparse).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from wbmark import attacks, schemes
from wbmark.checkpoint import Checkpoint
from wbmark.core import BitString, ber, derive_rng, derive_seed, verify_payload
from wbmark.data import DATA_ENV, ingest_dataset
from wbmark.errors import WbmarkError
from wbmark.harness import ExperimentConfig, run_experiment
from wbmark.models import (BENCHMARKS, TrainConfig, checkpoint_to_model,
                           evaluate_accuracy, train_baseline)

_ARCH_DATASET = {"bm1_mlp": "mnist", "bm2_cnn": "cifar10",
                 "bm3_resnet18": "cifar10", "bm4_lenet": "mnist",
                 "lenet_small": "mnist"}


def _dataset_for(ckpt: Checkpoint, root):
    name = ckpt.meta.get("dataset") or _ARCH_DATASET.get(ckpt.arch)
    if name is None:
        raise WbmarkError(f"cannot infer dataset for architecture {ckpt.arch!r}")
    return ingest_dataset(name, root)


def _read_payload(path: str) -> BitString:
    return BitString.from01(Path(path).read_text())


def _cmd_train(args) -> int:
    bench = BENCHMARKS[args.benchmark]
    train, test = ingest_dataset(bench.dataset, args.data)
    cfg = TrainConfig(epochs=args.epochs if args.epochs is not None else bench.default_epochs,
                      batch_size=args.batch_size, learning_rate=args.lr,
                      weight_decay=args.weight_decay, optimizer=args.optimizer,
                      seed=args.seed)
    ckpt = train_baseline(bench, train, test, cfg,
                          on_epoch=lambda e, l: print(f"epoch={e} loss={l:.4f}", flush=True))
    ckpt.save(args.out)
    print(f"accuracy={ckpt.meta['final_accuracy']}")
    print(f"checkpoint={args.out}")
    return 0


def _cmd_embed(args) -> int:
    base = Checkpoint.load(args.ckpt)
    train, test = _dataset_for(base, args.data)
    model = checkpoint_to_model(base)
    if args.payload:
        payload = _read_payload(args.payload)
        bits = len(payload)
    else:
        bits = args.payload_bits
        payload = BitString.random(bits, derive_rng(args.seed, "payload"))
    scheme_params = {}
    if args.layer_index is not None:
        scheme_params["layer_index"] = args.layer_index
    keys = schemes.generate_keys(args.scheme, model, bits,
                                 seed=derive_seed(args.seed, "keys"),
                                 train=train, **scheme_params)
    embed_params = {}
    if args.scheme == "diction":
        hyper = {"epochs": args.epochs, "lam": args.wat_lambda}
        embed_params["hyper"] = {k: v for k, v in hyper.items() if v is not None}
    else:
        if args.epochs is not None:
            embed_params["cfg"] = {"epochs": args.epochs, "seed": args.seed}
        if args.wat_lambda is not None and args.scheme == "uchida":
            embed_params["lam"] = args.wat_lambda
    wat, keys, report = schemes.embed(args.scheme, base, payload, keys, train, test,
                                      seed=derive_seed(args.seed, "embed"),
                                      **embed_params)
    wat.save(args.out)
    schemes.save_keys(keys, args.keys_out)
    if args.payload_out:
        Path(args.payload_out).write_text(payload.to01() + "\n")
    print(f"ber={report['ber']}")
    print(f"accuracy={report['accuracy']}")
    print(f"checkpoint={args.out}")
    print(f"keys={args.keys_out}")
    if report["ber"] > 0:
        print(f"warning: embedding did not converge (ber={report['ber']})",
              file=sys.stderr)
    return 0


def _extract_bits(args) -> tuple[BitString, object]:
    ckpt = Checkpoint.load(args.ckpt)
    keys = schemes.load_keys(args.keys)
    kwargs = {}
    train = None
    if schemes.scheme_of(keys) == "deepsigns":
        train, _ = _dataset_for(ckpt, args.data)
    elif schemes.scheme_of(keys) == "diction":
        kwargs = {"n_samples": args.samples, "seed": args.extract_seed}
    return schemes.extract(keys, ckpt, train=train, **kwargs), keys


def _cmd_extract(args) -> int:
    bits, _ = _extract_bits(args)
    print(bits.to01())
    return 0


def _cmd_verify(args) -> int:
    extracted, _ = _extract_bits(args)
    payload = _read_payload(args.payload)
    result = verify_payload(extracted, payload, args.threshold)
    print(f"ber={result.ber}")
    print(f"matched={str(result.matched).lower()}")
    return 0


def _cmd_attack_prune(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    pruned = attacks.prune(ckpt, args.alpha)
    pruned.save(args.out)
    print(f"checkpoint={args.out}")
    return 0


def _cmd_attack_finetune(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    train, test = _dataset_for(ckpt, args.data)
    snaps = attacks.finetune_attack(ckpt, train, args.epochs, seed=args.seed)
    final = snaps[args.epochs]
    final.save(args.out)
    print(f"accuracy={evaluate_accuracy(final, test)}")
    print(f"checkpoint={args.out}")
    return 0


def _cmd_attack_overwrite(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    train, test = _dataset_for(ckpt, args.data)
    embed_params = {}
    if args.epochs is not None:
        if args.scheme == "diction":
            embed_params["hyper"] = {"epochs": args.epochs}
        else:
            embed_params["cfg"] = {"epochs": args.epochs}
    res = attacks.overwrite_attack(ckpt, args.scheme, args.payload_bits,
                                   args.attacker_seed, train, test,
                                   embed_params=embed_params or None)
    res["checkpoint"].save(args.out)
    if args.keys_out:
        schemes.save_keys(res["attacker_keys"], args.keys_out)
    print(f"attacker_ber={res['attacker_ber']}")
    print(f"accuracy={res['attacker_accuracy']}")
    print(f"checkpoint={args.out}")
    return 0


def _cmd_attack_dist(args) -> int:
    wat = Checkpoint.load(args.ckpt)
    base = Checkpoint.load(args.baseline)
    _, test = _dataset_for(wat, args.data)
    layer = args.layer_index
    if layer is None:
        from wbmark.models import default_watermark_layer
        layer = default_watermark_layer(checkpoint_to_model(wat))
    report = attacks.distribution_report(wat, base, layer, test, bins=args.bins)
    print(f"ks_weights={report['ks_weights']}")
    print(f"ks_activations={report['ks_activations']}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True))
        print(f"report={args.out}")
    return 0


def _cmd_attack_pia(args) -> int:
    train, test = ingest_dataset("mnist", args.data)
    pool = attacks.pia_generate_pool(
        train, test, n_watermarked=args.n_watermarked, n_clean=args.n_clean,
        arch=args.arch, seed=args.seed, train_epochs=args.train_epochs,
        subset_size=args.subset_size, embed_epochs=args.embed_epochs,
        payload_bits=args.payload_bits, accuracy_floor=args.accuracy_floor,
        log=lambda m: print(m, flush=True))
    _det, train_acc, test_acc = attacks.pia_train_detector(
        pool, holdout_fraction=args.holdout_fraction,
        epochs=args.detector_epochs, seed=args.seed)
    print(f"pool_size={len(pool.labels)}")
    print(f"detector_train_accuracy={train_acc}")
    print(f"detector_test_accuracy={test_acc}")
    return 0


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    record = run_experiment(config, force=args.force,
                            log=lambda m: print(m, flush=True))
    print(f"config_hash={record['config_hash']}")
    print(f"aggregate={json.dumps(record['aggregate'], sort_keys=True)}")
    return 0


def _cmd_report(args) -> int:
    from wbmark.report import render
    outputs = render(args.results, args.out)
    for name in sorted(outputs):
        print(f"{name}={outputs[name]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wbmark",
        description="White-box neural-network watermarking toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data(p):
        p.add_argument("--data", default=None,
                       help=f"dataset root (default ${DATA_ENV} or ./data)")

    p = sub.add_parser("train", help="train a benchmark baseline")
    p.add_argument("--benchmark", type=int, required=True, choices=sorted(BENCHMARKS))
    p.add_argument("--out", required=True, help="checkpoint directory to write")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--seed", type=int, default=0)
    add_data(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("embed", help="embed a watermark into a checkpoint")
    p.add_argument("--scheme", required=True, choices=schemes.scheme_names())
    p.add_argument("--ckpt", required=True, help="base checkpoint directory")
    p.add_argument("--out", required=True, help="watermarked checkpoint directory")
    p.add_argument("--keys-out", required=True, help="key manifest path (.json)")
    p.add_argument("--payload", default=None, help="payload file of 0/1 characters")
    p.add_argument("--payload-bits", type=int, default=256,
                   help="generate a random payload of this many bits")
    p.add_argument("--payload-out", default=None, help="write the payload here")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lambda", dest="wat_lambda", type=float, default=None,
                   help="watermark loss weight")
    p.add_argument("--layer-index", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    add_data(p)
    p.set_defaults(func=_cmd_embed)

    for name, func in (("extract", _cmd_extract), ("verify", _cmd_verify)):
        p = sub.add_parser(name, help=f"{name} a watermark payload")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--keys", required=True)
        if name == "verify":
            p.add_argument("--payload", required=True)
            p.add_argument("--threshold", type=float, default=0.0)
        p.add_argument("--samples", type=int, default=100,
                       help="latent samples for diction extraction")
        p.add_argument("--extract-seed", type=int, default=None)
        add_data(p)
        p.set_defaults(func=func)

    atk = sub.add_parser("attack", help="run a removal/detection attack")
    asub = atk.add_subparsers(dest="attack", required=True)

    p = asub.add_parser("prune", help="magnitude pruning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_attack_prune)

    p = asub.add_parser("finetune", help="task-only fine-tuning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    add_data(p)
    p.set_defaults(func=_cmd_attack_finetune)

    p = asub.add_parser("overwrite", help="embed a fresh attacker watermark")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scheme", required=True, choices=schemes.scheme_names())
    p.add_argument("--payload-bits", type=int, default=256)
    p.add_argument("--attacker-seed", type=int, default=1)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--keys-out", default=None)
    add_data(p)
    p.set_defaults(func=_cmd_attack_overwrite)

    p = asub.add_parser("dist", help="weight/activation distribution divergence")
    p.add_argument("--ckpt", required=True, help="watermarked checkpoint")
    p.add_argument("--baseline", required=True)
    p.add_argument("--layer-index", type=int, default=None)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--out", default=None, help="JSON report path")
    add_data(p)
    p.set_defaults(func=_cmd_attack_dist)

    p = asub.add_parser("pia", help="property inference over a model pool")
    p.add_argument("--n-watermarked", type=int, default=60)
    p.add_argument("--n-clean", type=int, default=60)
    p.add_argument("--arch", default="lenet_small")
    p.add_argument("--train-epochs", type=int, default=3)
    p.add_argument("--subset-size", type=int, default=12000)
    p.add_argument("--embed-epochs", type=int, default=2)
    p.add_argument("--payload-bits", type=int, default=256)
    p.add_argument("--accuracy-floor", type=float, default=0.95)
    p.add_argument("--detector-epochs", type=int, default=50)
    p.add_argument("--holdout-fraction", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    add_data(p)
    p.set_defaults(func=_cmd_attack_pia)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true",
                   help="ignore cached results for this config")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="render tables and figures from results")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except WbmarkError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
