"""Command-line entry point.

Every subcommand builds a RunConfig dict, executes it, and records it next
to its primary output as ``<out>.runconfig.json``; re-running any command
with ``--config <that file>`` reproduces the outputs byte for byte. All
randomness flows from the single ``--seed`` through named streams, and all
files are written atomically (temp + rename).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import binquant, codec, datasets, gwk, nets, qat as qatmod, rng, sensitivity
from . import harness
from .container import ContainerError, load_model, quantize_model_weights, write_atomic

log = logging.getLogger("bqkit.cli")


class CliError(ValueError):
    pass


def _jobs_default() -> int:
    try:
        return max(1, int(os.environ.get("BQKIT_JOBS", "1")))
    except ValueError:
        return 1


def _write_json(path, obj) -> None:
    write_atomic(path, (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    write_atomic(path, buf.getvalue().encode("utf-8"))


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def _record_config(cfg: dict, primary_out: str) -> None:
    _write_json(primary_out + ".runconfig.json", cfg)


def _load_splits(params: dict):
    """(train, test) datasets from a generator name or an .nnds path."""
    name = params["data"]
    if name.endswith(".nnds"):
        ds = datasets.load_dataset(name)
        return ds, ds
    seed = params.get("data_seed", 0)
    train = datasets.generate(name, params.get("train_samples", 2048), seed, datasets.TRAIN)
    test = datasets.generate(name, params.get("test_samples", 1024), seed, datasets.TEST)
    return train, test


def _load_any_model(path):
    """Model + optional embedded QatConfig, from .nnmod or .bqz."""
    if path.endswith(".bqz"):
        model, info = codec.read_compressed(path)
        return model, info["qat"]
    return load_model(path), None


# --- command implementations ---------------------------------------------------


def _run_train(p: dict) -> None:
    train_ds, _ = _load_splits(p)
    num_classes = int(train_ds.labels.max()) + 1
    model = nets.build_model(p["arch"], num_classes, p["seed"])
    cfg = harness.TrainConfig(p["lr"], p["epochs"], p["batch_size"], p["seed"], p["momentum"])
    trained, _, metrics = harness.train(model, train_ds, cfg)
    trained.save(p["out"])
    _write_csv(p["metrics"], ("epoch", "loss", "accuracy"),
               [(m["epoch"], _fmt(m["loss"]), _fmt(m["accuracy"])) for m in metrics])


def _run_analyze(p: dict) -> None:
    model, _ = _load_any_model(p["model"])
    train_ds, test_ds = _load_splits(p)
    layers = p.get("layers") or sensitivity.layers_by_param_count(model)
    report = sensitivity.SensitivityReport([])
    rep_seeds = [int(rng.stream(p["seed"], "analyze-rep", i).integers(1 << 31))
                 for i in range(p["seeds"])]
    for rep_seed in rep_seeds:
        if p["mode"] == "gaussian":
            report.extend(sensitivity.gaussian_layer_sweep(
                model, test_ds, layers, p["std"], seed=rep_seed,
                eval_samples=p["eval_samples"], jobs=p["jobs"]))
        elif p["mode"] == "grad-vs-random":
            stats = harness.accumulate_gradients(model, train_ds, batch_size=p["batch_size"])
            report.extend(sensitivity.gradient_vs_random(
                model, test_ds, stats, std=p["std"], fraction=p["fraction"],
                seed=rep_seed, layers=layers, eval_samples=p["eval_samples"], jobs=p["jobs"]))
        elif p["mode"] == "u8-layers":
            report.extend(sensitivity.rel_layer_sweep_u8(
                model, test_ds, layers, rel=p["rel"], seed=rep_seed,
                eval_samples=p["eval_samples"], jobs=p["jobs"]))
        elif p["mode"] == "bins":
            for layer in layers:
                ldesc = next(l for l in model.manifest.layers if l.name == layer)
                t = model.tensor(ldesc.weight_ref)
                if t.dtype == "u8":
                    edges = binquant.initial_bins_u8(t.data, p["bins"])
                    rel = p["rel"] if p["rel"] > 0 else 0.03
                else:
                    vals = t.data.astype(np.float64)
                    edges = binquant.initial_bins_invcdf(float(vals.mean()),
                                                         float(vals.std()) or 1e-6, p["bins"])
                    rel = p["rel"] if p["rel"] > 0 else 0.5
                report.extend(sensitivity.bin_magnitude_sweep(
                    model, test_ds, layer, edges, rel, seed=rep_seed,
                    eval_samples=p["eval_samples"], jobs=p["jobs"]))
        else:
            raise CliError(f"unknown analyze mode {p['mode']!r}")
    report.to_csv(p["out"])


def _run_compress(p: dict) -> None:
    model, _ = _load_any_model(p["model"])
    _, test_ds = _load_splits(p)
    if p["variant"] == "u8":
        model = quantize_model_weights(model)
    cfg = binquant.BqConfig(
        max_bins=p["max_bins"], per_bin_drop_limit=p["per_bin_drop"],
        layer_drop_limit=p["layer_drop"], eval_samples=p["eval_samples"],
        layers_to_try=p["layers_to_try"], init_bins=p["init_bins"],
        init_mean=p["init_mean"], init_std=p["init_std"])
    share = {}
    for pair in p.get("share", []):
        donor, _, recipient = pair.partition(":")
        if not donor or not recipient:
            raise CliError(f"--share expects donor:recipient, got {pair!r}")
        share[recipient] = donor
    baseline = harness.evaluate(model, test_ds)
    results, compressed = binquant.compress_model(model, test_ds, cfg, seed=p["seed"],
                                                  share=share or None, jobs=p["jobs"])
    final_acc = harness.evaluate(compressed, test_ds)

    codings = {}
    for r in results:
        if r.accepted:
            codings[r.tensor_name] = {"mode": "bq", "spec": r.bin_spec,
                                      "labels": r.labels, "huffman": p["huffman"]}
    codec.write_compressed(compressed, codings, p["out"])

    _, info = codec.read_compressed(p["out"])
    report = {
        "baseline_accuracy": baseline,
        "final_accuracy": final_acc,
        "accuracy_drop": baseline - final_acc,
        "rejected_layers": [r.layer for r in results if not r.accepted],
        "layers": [
            {
                "layer": r.layer,
                "accepted": r.accepted,
                "degenerate": r.degenerate,
                "bins": r.bin_spec.b,
                "baseline": r.baseline,
                "accuracy_after": r.accuracy_after,
                "drop": r.drop,
                "bin_counts": [int(c) for c in r.bin_spec.member_counts],
                "trace": list(r.trace),
            }
            for r in results
        ],
        "file_bytes": os.path.getsize(p["out"]),
    }
    weight_refs = {l.weight_ref for l in compressed.weight_layers()}
    report["bits_per_weight"] = gwk.bits_per_weight(
        [e for e in info["layers"] if e["layer"] in weight_refs])
    _write_json(p["report"], report)


def _run_gwk(p: dict) -> None:
    model, _ = _load_any_model(p["model"])
    train_ds, test_ds = _load_splits(p)
    qat = qatmod.calibrate(model, train_ds, p["weight_bits"], p["act_bits"], p["delta"])
    pq = gwk.PQConfig(d_conv=p["d_conv"], d_pw=p["d_pw"], n_clusters=1 << p["bits"])
    cfg = harness.TrainConfig(p["lr"], p["epochs"], p["batch_size"], p["seed"], p["momentum"])
    trained, codebooks, result = gwk.gwk_train(
        model, train_ds, pq, qat, cfg, eval_dataset=test_ds,
        uniform_weights=p["uniform_weights"], exempt_first_last=p["exempt_first_last"])

    codings = {name: {"mode": "pq", "codebook": cb["codebook"], "origin": cb["origin"]}
               for name, cb in codebooks.items()}
    codec.write_compressed(trained, codings, p["out"], qat=qat)

    layer_names = sorted({k for row in result["trace"] for k in row if k.startswith("objective:")})
    header = ["epoch", "loss", "accuracy"] + layer_names
    rows = []
    for row in result["trace"]:
        rows.append([row["epoch"], _fmt(row["loss"]), _fmt(row["accuracy"])]
                    + [_fmt(row[k]) if k in row else "" for k in layer_names])
    _write_csv(p["trace"], header, rows)


def _run_eval(p: dict) -> None:
    model, embedded_qat = _load_any_model(p["model"])
    _, test_ds = _load_splits(p)
    acc = harness.evaluate(model, test_ds, qat=embedded_qat, limit=p["eval_samples"])
    out = {"model": p["model"], "accuracy": acc, "samples": test_ds.take(p["eval_samples"]).n}
    print(json.dumps(out, sort_keys=True))
    if p.get("out"):
        _write_json(p["out"], out)


def _run_report(p: dict) -> None:
    model, info = codec.read_compressed(p["compressed"])
    weight_refs = {l.weight_ref for l in model.weight_layers()}
    weight_entries = [e for e in info["layers"] if e["layer"] in weight_refs]
    bpw = gwk.bits_per_weight(weight_entries)

    ratios = {}
    for e in weight_entries:
        if e["mode"] == "raw":
            continue
        count = e["weight_count"]
        coded_bits = e["label_bits"] + e["codebook_bits"]
        t = model.tensor(e["layer"])
        n = t.shape[0]
        m = count // n
        ratios[e["layer"]] = {
            "measured": count * e["native_bits"] / coded_bits,
            "formula_32bit": codec.compression_ratio(n, m, max(2, e["b"])),
        }

    report = {
        "compressed_file": p["compressed"],
        "compressed_bytes": os.path.getsize(p["compressed"]),
        "manifest_bytes": info["manifest_bytes"],
        "payload_bytes": info["payload_bytes"],
        "bits_per_weight": bpw,
        "layer_ratios": ratios,
    }
    if p.get("original"):
        report["original_bytes"] = os.path.getsize(p["original"])
        report["file_ratio"] = report["original_bytes"] / report["compressed_bytes"]
    if p.get("data"):
        _, test_ds = _load_splits(p)
        report["accuracy"] = harness.evaluate(model, test_ds, qat=info["qat"])
        if p.get("original"):
            original, _ = _load_any_model(p["original"])
            base = harness.evaluate(original, test_ds)
            report["original_accuracy"] = base
            report["accuracy_delta"] = base - report["accuracy"]
    _write_json(p["out"], report)


_RUNNERS = {
    "train": (_run_train, "out"),
    "analyze": (_run_analyze, "out"),
    "compress": (_run_compress, "out"),
    "gwk": (_run_gwk, "out"),
    "eval": (_run_eval, None),
    "report": (_run_report, "out"),
}


def execute(cfg: dict) -> None:
    command = cfg.get("command")
    if command not in _RUNNERS:
        raise CliError(f"unknown command {command!r}")
    runner, primary = _RUNNERS[command]
    runner(cfg["params"])
    if primary is not None:
        _record_config(cfg, cfg["params"][primary])


def _add_common(sp, data_default="textures"):
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--jobs", type=int, default=None,
                    help="worker cap (default: $BQKIT_JOBS or 1)")
    sp.add_argument("--config", default=None,
                    help="re-run from a recorded runconfig JSON (other flags ignored)")
    sp.add_argument("--data", default=data_default,
                    help="generator name (blobs|textures) or an .nnds path")
    sp.add_argument("--data-seed", type=int, default=0)
    sp.add_argument("--train-samples", type=int, default=2048)
    sp.add_argument("--test-samples", type=int, default=1024)


def _data_params(a) -> dict:
    return {"data": a.data, "data_seed": a.data_seed,
            "train_samples": a.train_samples, "test_samples": a.test_samples}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bqkit",
                                 description="weight binning / gradient-weighted "
                                             "k-means model compression toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train a reference net")
    _add_common(sp)
    sp.add_argument("--arch", choices=nets.ARCHS, default="cnn")
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--out", default="model.nnmod")
    sp.add_argument("--metrics", default=None)

    sp = sub.add_parser("analyze", help="sensitivity sweeps")
    _add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--mode", choices=("gaussian", "bins", "grad-vs-random", "u8-layers"),
                    default="gaussian")
    sp.add_argument("--std", type=float, default=0.05)
    sp.add_argument("--rel", type=float, default=0.0)
    sp.add_argument("--fraction", type=float, default=0.5)
    sp.add_argument("--seeds", type=int, default=1)
    sp.add_argument("--bins", type=int, default=8)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--layers", default=None, help="comma-separated layer names")
    sp.add_argument("--eval-samples", type=int, default=1000)
    sp.add_argument("--out", default="sensitivity.csv")

    sp = sub.add_parser("compress", help="Bin & Quant compression")
    _add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--variant", choices=("float", "u8"), default="float")
    sp.add_argument("--max-bins", type=int, default=32)
    sp.add_argument("--per-bin-drop", type=float, default=0.02)
    sp.add_argument("--layer-drop", type=float, default=0.01)
    sp.add_argument("--eval-samples", type=int, default=1000)
    sp.add_argument("--layers-to-try", type=int, default=None)
    sp.add_argument("--init-bins", type=int, default=8)
    sp.add_argument("--init-mean", type=float, default=None)
    sp.add_argument("--init-std", type=float, default=None)
    sp.add_argument("--huffman", action="store_true")
    sp.add_argument("--share", action="append", default=[],
                    help="donor:recipient bin sharing (repeatable)")
    sp.add_argument("--out", default="model.bqz")
    sp.add_argument("--report", default=None)

    sp = sub.add_parser("gwk", help="gradient-weighted k-means training")
    _add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--d-conv", type=int, default=4)
    sp.add_argument("--d-pw", type=int, default=2)
    sp.add_argument("--bits", type=int, default=4, help="cluster bits: b = 2^bits")
    sp.add_argument("--weight-bits", type=int, default=8)
    sp.add_argument("--act-bits", type=int, default=8)
    sp.add_argument("--delta", type=float, default=0.2)
    sp.add_argument("--epochs", type=int, default=8)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--uniform-weights", action="store_true",
                    help="ablation: plain means instead of gradient weighting")
    sp.add_argument("--exempt-first-last", action="store_true")
    sp.add_argument("--out", default="model.bqz")
    sp.add_argument("--trace", default=None)

    sp = sub.add_parser("eval", help="accuracy of a .nnmod or .bqz model")
    _add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--eval-samples", type=int, default=None)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("report", help="aggregate compression accounting")
    _add_common(sp, data_default=None)
    sp.add_argument("--compressed", required=True)
    sp.add_argument("--original", default=None)
    sp.add_argument("--out", default="report.json")

    return ap


def _config_from_args(a) -> dict:
    jobs = a.jobs if a.jobs is not None else _jobs_default()
    p: dict = {"seed": a.seed, "jobs": jobs}
    if a.command == "train":
        p.update(_data_params(a))
        p.update(arch=a.arch, epochs=a.epochs, batch_size=a.batch_size, lr=a.lr,
                 momentum=a.momentum, out=a.out,
                 metrics=a.metrics or a.out + ".metrics.csv")
    elif a.command == "analyze":
        p.update(_data_params(a))
        p.update(model=a.model, mode=a.mode, std=a.std, rel=a.rel, fraction=a.fraction,
                 seeds=a.seeds, bins=a.bins, batch_size=a.batch_size,
                 layers=a.layers.split(",") if a.layers else None,
                 eval_samples=a.eval_samples, out=a.out)
    elif a.command == "compress":
        p.update(_data_params(a))
        p.update(model=a.model, variant=a.variant, max_bins=a.max_bins,
                 per_bin_drop=a.per_bin_drop, layer_drop=a.layer_drop,
                 eval_samples=a.eval_samples, layers_to_try=a.layers_to_try,
                 init_bins=a.init_bins, init_mean=a.init_mean, init_std=a.init_std,
                 huffman=a.huffman, share=a.share, out=a.out,
                 report=a.report or a.out + ".report.json")
    elif a.command == "gwk":
        p.update(_data_params(a))
        p.update(model=a.model, d_conv=a.d_conv, d_pw=a.d_pw, bits=a.bits,
                 weight_bits=a.weight_bits, act_bits=a.act_bits, delta=a.delta,
                 epochs=a.epochs, batch_size=a.batch_size, lr=a.lr, momentum=a.momentum,
                 uniform_weights=a.uniform_weights, exempt_first_last=a.exempt_first_last,
                 out=a.out, trace=a.trace or a.out + ".trace.csv")
    elif a.command == "eval":
        p.update(_data_params(a))
        p.update(model=a.model, eval_samples=a.eval_samples, out=a.out)
    elif a.command == "report":
        p.update(_data_params(a))
        p.update(compressed=a.compressed, original=a.original, out=a.out)
    return {"command": a.command, "params": p}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            with open(args.config) as f:
                cfg = json.load(f)
            if cfg.get("command") != args.command:
                raise CliError(
                    f"config is for {cfg.get('command')!r}, invoked as {args.command!r}")
        else:
            cfg = _config_from_args(args)
        execute(cfg)
    except (CliError, ContainerError, codec.CodecError, binquant.BinQuantError,
            harness.HarnessError, gwk.GwkError, sensitivity.SensitivityError,
            qatmod.QatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
