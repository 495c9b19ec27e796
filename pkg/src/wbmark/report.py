"""Render results records into delimited tables and figures.

Reads every record.json under a results directory and writes, into the
report directory:

    embed_results.csv            accuracy/BER per benchmark and scheme
    finetune_robustness.csv      accuracy/BER vs attack epochs
    overwrite_robustness.csv     owner/attacker BER per overwrite size
    prune_sweep.csv              accuracy/BER vs pruning rate
    distribution_divergence.csv  KS statistics (weights, activations)
    pia.csv                      property-inference detector accuracy
    prune_bm<id>_<scheme>.png    sweep curves (accuracy line, BER dots)
    distribution_bm<id>_<scheme>.png   paired histograms

CSV output is byte-stable for identical records: rows are sorted and
floats serialized with repr.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from wbmark.errors import InputError


def load_records(results_dir: str | Path) -> list[dict]:
    results_dir = Path(results_dir)
    records = [json.loads(p.read_text())
               for p in sorted(results_dir.glob("*/record.json"))]
    if not records:
        raise InputError(f"no results records found under {results_dir}")
    return records


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(round(value, 10))
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    rows = sorted(rows, key=lambda r: tuple(str(x) for x in r))
    with open(path, "w", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _attack_entries(record: dict, kind: str):
    for rep in record["repetitions"]:
        for atk in rep.get("attacks", []):
            if atk.get("kind") == kind:
                yield rep, atk


def _mean(values):
    return float(np.mean(values))


def render(results_dir: str | Path, out_dir: str | Path) -> dict:
    """Write all tables and figures; returns {name: path} of outputs."""
    records = load_records(results_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: dict[str, str] = {}

    def key(record):
        cfg = record["config"]
        return cfg["benchmark_id"], cfg.get("scheme") or "-", cfg["payload_bits"]

    # embedding results
    rows = []
    for rec in records:
        bid, scheme, bits = key(rec)
        agg = rec["aggregate"]
        if scheme == "-" or "ber_mean" not in agg:
            continue
        rows.append((bid, scheme, bits, agg.get("baseline_acc_mean"),
                     agg.get("acc_mean"), agg.get("ber_mean"),
                     agg.get("repetitions")))
    if rows:
        path = out_dir / "embed_results.csv"
        _write_csv(path, ["benchmark_id", "scheme", "payload_bits",
                          "baseline_acc_mean", "acc_mean", "ber_mean",
                          "repetitions"], rows)
        outputs["embed_results"] = str(path)

    # fine-tuning robustness
    rows = []
    for rec in records:
        bid, scheme, _ = key(rec)
        per_epoch: dict[int, list] = {}
        for _rep, atk in _attack_entries(rec, "finetune"):
            for entry in atk["entries"]:
                per_epoch.setdefault(entry["epoch"], []).append(entry)
        for epoch, entries in per_epoch.items():
            rows.append((bid, scheme, epoch,
                         _mean([e["accuracy"] for e in entries]),
                         _mean([e["ber"] for e in entries])))
    if rows:
        path = out_dir / "finetune_robustness.csv"
        _write_csv(path, ["benchmark_id", "scheme", "epochs", "accuracy", "ber"], rows)
        outputs["finetune_robustness"] = str(path)

    # overwrite robustness
    rows = []
    for rec in records:
        bid, scheme, _ = key(rec)
        per_bits: dict[int, list] = {}
        for _rep, atk in _attack_entries(rec, "overwrite"):
            per_bits.setdefault(atk["payload_bits"], []).append(atk)
        for bits, entries in per_bits.items():
            rows.append((bid, scheme, bits,
                         _mean([e["owner_ber"] for e in entries]),
                         _mean([e["attacker_ber"] for e in entries]),
                         _mean([e["accuracy"] for e in entries])))
    if rows:
        path = out_dir / "overwrite_robustness.csv"
        _write_csv(path, ["benchmark_id", "scheme", "overwrite_bits",
                          "owner_ber", "attacker_ber", "accuracy"], rows)
        outputs["overwrite_robustness"] = str(path)

    # prune sweeps: table plus one figure per (benchmark, scheme)
    rows = []
    for rec in records:
        bid, scheme, _ = key(rec)
        per_alpha: dict[float, list] = {}
        for _rep, atk in _attack_entries(rec, "prune_sweep"):
            for entry in atk["entries"]:
                per_alpha.setdefault(entry["alpha"], []).append(entry)
        if not per_alpha:
            continue
        alphas = sorted(per_alpha)
        accs = [_mean([e["accuracy"] for e in per_alpha[a]]) for a in alphas]
        bers = [_mean([e["ber"] for e in per_alpha[a]]) for a in alphas]
        rows += [(bid, scheme, a, acc, b) for a, acc, b in zip(alphas, accs, bers)]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(alphas, accs, "-o", color="tab:blue", label="accuracy")
        ax.plot(alphas, bers, ":s", color="tab:red", label="BER")
        ax.set_xlabel("pruned weights per layer (%)")
        ax.set_ylabel("accuracy / BER")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(f"benchmark {bid}, {scheme}: pruning robustness")
        ax.legend()
        fig.tight_layout()
        fpath = out_dir / f"prune_bm{bid}_{scheme}.png"
        fig.savefig(fpath, dpi=120)
        plt.close(fig)
        outputs[f"prune_bm{bid}_{scheme}"] = str(fpath)
    if rows:
        path = out_dir / "prune_sweep.csv"
        _write_csv(path, ["benchmark_id", "scheme", "alpha", "accuracy", "ber"], rows)
        outputs["prune_sweep"] = str(path)

    # distribution divergence: table plus paired histograms
    rows = []
    for rec in records:
        bid, scheme, _ = key(rec)
        for _rep, atk in _attack_entries(rec, "distribution"):
            rows.append((bid, scheme, atk["layer_index"],
                         atk["ks_weights"], atk["ks_activations"]))
            fig, axes = plt.subplots(1, 2, figsize=(10, 4))
            for ax, which, label in ((axes[0], "weights_hist", "layer weights"),
                                     (axes[1], "activations_hist", "activation maps")):
                hist = atk[which]
                edges = np.asarray(hist["edges"])
                centers = 0.5 * (edges[:-1] + edges[1:])
                ax.step(centers, hist["baseline"], where="mid",
                        color="tab:blue", label="baseline")
                ax.step(centers, hist["watermarked"], where="mid",
                        color="tab:red", label="watermarked", alpha=0.8)
                ax.set_xlabel(label)
                ax.set_ylabel("count")
                ax.legend()
            fig.suptitle(f"benchmark {bid}, {scheme}: distribution preservation")
            fig.tight_layout()
            fpath = out_dir / f"distribution_bm{bid}_{scheme}.png"
            fig.savefig(fpath, dpi=120)
            plt.close(fig)
            outputs[f"distribution_bm{bid}_{scheme}"] = str(fpath)
            break  # one figure per record
    if rows:
        path = out_dir / "distribution_divergence.csv"
        _write_csv(path, ["benchmark_id", "scheme", "layer_index",
                          "ks_weights", "ks_activations"], rows)
        outputs["distribution_divergence"] = str(path)

    # property inference
    rows = []
    for rec in records:
        bid, _scheme, _ = key(rec)
        for _rep, atk in _attack_entries(rec, "pia"):
            rows.append((bid, atk["pool_size"], atk["excluded"],
                         atk["detector_train_accuracy"],
                         atk["detector_test_accuracy"]))
    if rows:
        path = out_dir / "pia.csv"
        _write_csv(path, ["benchmark_id", "pool_size", "excluded",
                          "detector_train_accuracy", "detector_test_accuracy"], rows)
        outputs["pia"] = str(path)

    return outputs
