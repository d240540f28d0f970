"""Command-line entry point: ``neurossm <command> [flags]``.

Settings resolve as flag > ``--config`` file > built-in default. Exit codes:
0 ok, 2 usage or contract error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, bench, checkpoint, protocol
from .config import parse_floats, parse_ints, read_kv
from .data import holdout, ingest_csv, load_synthetic_spec, make_synthetic, write_dataset
from .errors import ContractError, DataError, DivergenceError
from .model import ModelConfig, NeuroSsmModel, param_count
from .train import TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

MODEL_DEFAULTS = dict(num_layers=1, tau_set="1,2,3", d_state=2, d_conv=1, expand=3, share_kernel="true",
                      enable_multiscale="true", enable_differential="true", eps=1e-5)
TRAIN_DEFAULTS = dict(epochs=20, batch_size=32, lr=5e-4, weight_decay=4e-5, crop_len=0,
                      adam_beta1=0.9, adam_beta2=0.999, adam_eps=1e-8, decoupled_wd="true")
COMMON_DEFAULTS = dict(seed=0, threads=1, out="runs/latest")


class UsageError(Exception):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- argument parsing

def _flag(p, name, default, help_text, **kw):
    # default=None so an omitted flag can fall back to the config file
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=None,
                   help=f"{help_text} (default: {default})", **kw)


def _common(p, out_default=COMMON_DEFAULTS["out"]):
    _flag(p, "seed", 0, "root seed for init, shuffling, cropping and splits", type=int)
    _flag(p, "threads", 1, "worker processes for independent runs", type=int)
    _flag(p, "out", out_default, "output directory")
    p.add_argument("--config", default=None, help="key = value file; flags override it (default: none)")


def _model_flags(p):
    _flag(p, "num_layers", 1, "stacked modules L", type=int)
    _flag(p, "tau_set", "1,2,3", "comma-separated temporal scales")
    _flag(p, "d_state", 2, "latent state size per channel", type=int)
    _flag(p, "d_conv", 1, "depthwise convolution width", type=int)
    _flag(p, "expand", 3, "inner width multiplier", type=int)
    _flag(p, "share_kernel", "true", "share the SSM kernel between the two streams")
    _flag(p, "enable_multiscale", "true", "use every scale in tau_set (false: tau = 1 only)")
    _flag(p, "enable_differential", "true", "add the differenced stream")
    _flag(p, "eps", 1e-5, "LayerNorm epsilon", type=float)


def _train_flags(p):
    _flag(p, "epochs", 20, "training epochs", type=int)
    _flag(p, "batch_size", 32, "mini-batch size", type=int)
    _flag(p, "lr", 5e-4, "Adam learning rate", type=float)
    _flag(p, "weight_decay", 4e-5, "weight decay", type=float)
    _flag(p, "crop_len", 0, "random crop length during training, 0 = no cropping", type=int)
    _flag(p, "adam_beta1", 0.9, "Adam beta1", type=float)
    _flag(p, "adam_beta2", 0.999, "Adam beta2", type=float)
    _flag(p, "adam_eps", 1e-8, "Adam epsilon", type=float)
    _flag(p, "decoupled_wd", "true", "decoupled weight decay (false: L2 added to the gradient)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neurossm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"neurossm {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="synthetic spec file (key = value)")
    _flag(p, "n_per_class", 20, "subjects per class (overrides the spec file)", type=int)
    _common(p)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    _flag(p, "val_frac", 0.2, "held-out validation fraction of subjects, 0 = train on all", type=float)
    _model_flags(p)
    _train_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    _flag(p, "split", "all", "'all' or 'val' (the held-out part of the train command's split)",
          choices=["all", "val"])
    _flag(p, "val_frac", 0.2, "validation fraction used at training time", type=float)
    _common(p)

    p = sub.add_parser("crossval", help="grouped stratified cross-validation with model selection")
    p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="candidate values for a model setting; repeat for a product grid (default: none)")
    _flag(p, "test_frac", 0.2, "held-out test fraction", type=float)
    _flag(p, "n_folds", 5, "inner folds", type=int)
    _model_flags(p)
    _train_flags(p)
    _common(p)

    p = sub.add_parser("curve", help="learning curve over subject fractions")
    p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    _flag(p, "fractions", "5,10,20,50,100", "percent of dev subjects per cell")
    _flag(p, "seeds", "0,1,2,3,4", "seeds per fraction")
    _flag(p, "test_frac", 0.2, "held-out test fraction", type=float)
    _model_flags(p)
    _train_flags(p)
    _common(p)

    p = sub.add_parser("ablate", help="component and scale ablation grid")
    p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    _flag(p, "seeds", "0,1,2,3,4", "seeds per variant")
    _flag(p, "test_frac", 0.2, "held-out test fraction", type=float)
    _model_flags(p)
    _train_flags(p)
    _common(p)

    p = sub.add_parser("bench", help="time and memory scaling of scan and model")
    _flag(p, "t_values", "256,512,1024,2048,4096", "sequence lengths for the T sweep")
    _flag(p, "n_values", "50,100,200,400", "ROI counts for the N sweep")
    _flag(p, "n_rois", 16, "ROI count during the T sweep", type=int)
    _flag(p, "bench_t", 256, "sequence length during the N sweep", type=int)
    _flag(p, "repeats", 5, "timed repeats per point (median reported)", type=int)
    _model_flags(p)
    _common(p)
    return ap


def resolve(args, defaults: dict) -> dict:
    """flag > config file > default, for every key in ``defaults``."""
    file_items = read_kv(args.config) if args.config else {}
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else file_items.get(key, default)
    return out


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    low = str(v).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def model_config(s: dict, n_rois: int, n_classes: int) -> ModelConfig:
    return ModelConfig(
        n_rois=n_rois, n_classes=n_classes, num_layers=int(s["num_layers"]),
        tau_set=tuple(parse_ints(str(s["tau_set"]))), d_state=int(s["d_state"]), d_conv=int(s["d_conv"]),
        expand=int(s["expand"]), share_kernel=_bool(s["share_kernel"]),
        enable_multiscale=_bool(s["enable_multiscale"]), enable_differential=_bool(s["enable_differential"]),
        eps=float(s["eps"]), seed=int(s["seed"]),
    )


def train_config(s: dict) -> TrainConfig:
    crop = int(s["crop_len"])
    return TrainConfig(
        epochs=int(s["epochs"]), batch_size=int(s["batch_size"]), lr=float(s["lr"]),
        weight_decay=float(s["weight_decay"]), crop_len=crop or None, seed=int(s["seed"]),
        adam_beta1=float(s["adam_beta1"]), adam_beta2=float(s["adam_beta2"]),
        adam_eps=float(s["adam_eps"]), decoupled_wd=_bool(s["decoupled_wd"]),
    )


# ---------------------------------------------------------------- run manifest

class RunManifest:
    """JSON record written before a run and finalized after it."""

    def __init__(self, out_dir: Path, command: str, argv: list[str], settings: dict, inputs: list[Path]):
        self.path = out_dir / "run_manifest.json"
        self.doc = {
            "command": command, "argv": argv, "settings": {k: str(v) for k, v in settings.items()},
            "seed": int(settings.get("seed", 0)), "code_version": __version__,
            "python": platform.python_version(), "numpy": np.__version__,
            "inputs": {str(p): sha256(p) for p in inputs}, "outputs": {},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "status": "running",
        }
        self._t0 = time.perf_counter()
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finalize(self, outputs: list[Path], status: str = "ok", **extra) -> None:
        self.doc["outputs"] = {str(p): sha256(p) for p in outputs if Path(p).exists()}
        self.doc["status"] = status
        self.doc["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.doc["wall_seconds"] = round(time.perf_counter() - self._t0, 3)
        self.doc.update(extra)
        self._write()


def data_inputs(manifest: Path) -> list[Path]:
    with open(manifest, newline="", encoding="utf-8") as fh:
        files = [manifest.parent / r["path"] for r in csv.DictReader(fh)]
    return [manifest] + files


def n_classes_of(data) -> int:
    return max(2, max(s.label for s in data) + 1)


# ---------------------------------------------------------------- commands

def cmd_synth(args, argv, out: Path) -> int:
    spec, n_per_class = load_synthetic_spec(args.spec)
    s = resolve(args, dict(COMMON_DEFAULTS, n_per_class=n_per_class, seed=spec.seed))
    spec = spec.replace(seed=int(s["seed"]))
    run = RunManifest(out, "synth", argv, dict(s, **spec.to_items()), [Path(args.spec)])
    data = make_synthetic(spec, int(s["n_per_class"]))
    manifest = write_dataset(data, out)
    (out / "synthetic_spec.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in spec.to_items().items()), encoding="utf-8")
    run.finalize(data_inputs(manifest) + [out / "synthetic_spec.txt"])
    print(f"wrote {len(data)} sequences to {out}")
    return EXIT_OK


def _write_trace(path: Path, trace: list[float]) -> None:
    lines = ["step,loss"] + [f"{i},{v!r}" for i, v in enumerate(trace)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _metrics_doc(report) -> dict:
    return {"accuracy": report.accuracy, "macro_f1": report.macro_f1, "auc": report.auc,
            "n": len(report.per_sample), "split": report.split}


def _write_eval(path: Path, report, subject_ids) -> None:
    lines = ["subject_id,label,probabilities"]
    for sid, (y, p) in zip(subject_ids, report.per_sample):
        lines.append(f"{sid},{y}," + " ".join(repr(v) for v in p))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args, argv, out: Path) -> int:
    s = resolve(args, dict(COMMON_DEFAULTS, val_frac=0.2, **MODEL_DEFAULTS, **TRAIN_DEFAULTS))
    manifest = Path(args.manifest)
    run = RunManifest(out, "train", argv, s, data_inputs(manifest))
    data = ingest_csv(manifest)
    tr_idx, va_idx = holdout(data, float(s["val_frac"]), int(s["seed"]))
    mcfg = model_config(s, data[0].n_rois, n_classes_of(data))
    tcfg = train_config(s)
    model = NeuroSsmModel.init(mcfg)
    trace_path = out / "loss_trace.csv"
    outputs = [out / "model.ckpt", trace_path, out / "metrics.json"]
    try:
        result = train(model, [data[i] for i in tr_idx], tcfg)
    except DivergenceError as exc:
        run.finalize([], status="diverged", error=str(exc))
        raise
    checkpoint.save(model, out / "model.ckpt")
    _write_trace(trace_path, result.loss_trace)
    metrics = {"params": param_count(mcfg), "n_train": len(tr_idx), "n_val": len(va_idx)}
    if va_idx:
        report = evaluate(model, [data[i] for i in va_idx], tcfg.seed, "val")
        metrics["val"] = _metrics_doc(report)
        _write_eval(out / "val_predictions.csv", report, [data[i].subject_id for i in va_idx])
        outputs.append(out / "val_predictions.csv")
    protocol.write_summary_json(out / "metrics.json", metrics)
    run.finalize(outputs)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, argv, out: Path) -> int:
    s = resolve(args, dict(COMMON_DEFAULTS, split="all", val_frac=0.2))
    manifest = Path(args.manifest)
    run = RunManifest(out, "eval", argv, dict(s, checkpoint=args.checkpoint),
                      data_inputs(manifest) + [Path(args.checkpoint)])
    model = checkpoint.load(args.checkpoint)
    data = ingest_csv(manifest)
    idx = list(range(len(data)))
    if s["split"] == "val":
        idx = holdout(data, float(s["val_frac"]), int(s["seed"]))[1]
        if not idx:
            raise UsageError("the validation split is empty for this val_frac")
    report = evaluate(model, [data[i] for i in idx], int(s["seed"]), str(s["split"]))
    protocol.write_summary_json(out / "eval_metrics.json", _metrics_doc(report))
    _write_eval(out / "eval_predictions.csv", report, [data[i].subject_id for i in idx])
    run.finalize([out / "eval_metrics.json", out / "eval_predictions.csv"])
    print(json.dumps(_metrics_doc(report), sort_keys=True))
    return EXIT_OK


def _grid(base: ModelConfig, specs: list[str]) -> list[ModelConfig]:
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"--grid expects KEY=V1,V2 (got {spec!r})")
        key, raw = spec.split("=", 1)
        key = key.strip()
        if key == "tau_set":
            values = [v.strip() for v in raw.split(";") if v.strip()]
        else:
            values = [v.strip() for v in raw.split(",") if v.strip()]
        axes.append([(key, v) for v in values])
    if not axes:
        return [base]
    items = base.to_items()
    return [ModelConfig.from_items(dict(items, **dict(combo))) for combo in itertools.product(*axes)]


def cmd_crossval(args, argv, out: Path) -> int:
    s = resolve(args, dict(COMMON_DEFAULTS, test_frac=0.2, n_folds=5, **MODEL_DEFAULTS, **TRAIN_DEFAULTS))
    manifest = Path(args.manifest)
    run = RunManifest(out, "crossval", argv, dict(s, grid=";".join(args.grid)), data_inputs(manifest))
    data = ingest_csv(manifest)
    base = model_config(s, data[0].n_rois, n_classes_of(data))
    candidates = _grid(base, args.grid)
    res = protocol.crossval(data, candidates, train_config(s), float(s["test_frac"]), int(s["n_folds"]),
                            int(s["threads"]))
    rows = res.rows()
    protocol.write_report_csv(out / "crossval_report.csv", rows)
    summary = {
        "candidates": [c.to_items() for c in candidates],
        "mean_val_accuracy": [res.mean_val_accuracy(i) for i in range(len(candidates))],
        "selected": res.selected, "test": _metrics_doc(res.test_report),
        "cells": protocol.summarize_rows(rows),
    }
    protocol.write_summary_json(out / "crossval_summary.json", summary)
    run.finalize([out / "crossval_report.csv", out / "crossval_summary.json"])
    print(json.dumps({"selected": res.selected, "test": _metrics_doc(res.test_report)}, sort_keys=True))
    return EXIT_OK


def cmd_curve(args, argv, out: Path) -> int:
    s = resolve(args, dict(COMMON_DEFAULTS, fractions="5,10,20,50,100", seeds="0,1,2,3,4", test_frac=0.2,
                           **MODEL_DEFAULTS, **TRAIN_DEFAULTS))
    manifest = Path(args.manifest)
    run = RunManifest(out, "curve", argv, s, data_inputs(manifest))
    data = ingest_csv(manifest)
    cfg = model_config(s, data[0].n_rois, n_classes_of(data))
    rows = protocol.learning_curve(data, cfg, train_config(s), parse_floats(str(s["fractions"])),
                                   parse_ints(str(s["seeds"])), float(s["test_frac"]), threads=int(s["threads"]))
    report = protocol.curve_rows(rows)
    protocol.write_report_csv(out / "curve_report.csv", report)
    protocol.write_summary_json(out / "curve_summary.json", protocol.summarize_rows(report))
    run.finalize([out / "curve_report.csv", out / "curve_summary.json"])
    print(f"{len(report)} learning-curve rows written to {out}")
    return EXIT_OK


def cmd_ablate(args, argv, out: Path) -> int:
    s = resolve(args, dict(COMMON_DEFAULTS, seeds="0,1,2,3,4", test_frac=0.2, **MODEL_DEFAULTS, **TRAIN_DEFAULTS))
    manifest = Path(args.manifest)
    run = RunManifest(out, "ablate", argv, s, data_inputs(manifest))
    data = ingest_csv(manifest)
    tr_idx, te_idx = holdout(data, float(s["test_frac"]), int(s["seed"]))
    if not te_idx:
        raise UsageError("test split is empty; raise --test-frac")
    base = model_config(s, data[0].n_rois, n_classes_of(data))
    res = protocol.ablation_grid([data[i] for i in tr_idx], [data[i] for i in te_idx], base, train_config(s),
                                 parse_ints(str(s["seeds"])), int(s["threads"]))
    protocol.write_report_csv(out / "ablation_report.csv", res.rows())
    protocol.write_summary_json(out / "ablation_summary.json", res.summary())
    run.finalize([out / "ablation_report.csv", out / "ablation_summary.json"])
    for row in res.summary():
        acc = row["accuracy"]
        print(f"{row['variant']:>10}  acc {acc['mean']:.4f} +- {acc['sd']:.4f}")
    return EXIT_OK


def cmd_bench(args, argv, out: Path) -> int:
    s = resolve(args, dict(COMMON_DEFAULTS, t_values="256,512,1024,2048,4096", n_values="50,100,200,400",
                           n_rois=16, bench_t=256, repeats=5, **MODEL_DEFAULTS))
    run = RunManifest(out, "bench", argv, s, [])
    base = model_config(s, int(s["n_rois"]), 2)
    points = bench.sweep_T(base, parse_ints(str(s["t_values"])), int(s["repeats"]))
    points += bench.sweep_N(base, parse_ints(str(s["n_values"])), int(s["bench_t"]), int(s["repeats"]))
    summary = bench.emit_scaling_report(points, out)
    files = [out / "bench_raw.csv", out / "bench_summary.json"] + sorted(out.glob("*.dat"))
    run.finalize(files, all_passed=summary["all_passed"])
    for c in summary["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']} = {c['value']:.6g}  band {c['band']}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "crossval": cmd_crossval,
            "curve": cmd_curve, "ablate": cmd_ablate, "bench": cmd_bench}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        file_items = read_kv(args.config) if args.config else {}
        out = Path(args.out if args.out is not None else file_items.get("out", COMMON_DEFAULTS["out"]))
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, argv, out)
    except DivergenceError as exc:
        print(f"neurossm {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as exc:
        print(f"neurossm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ContractError, ValueError) as exc:
        print(f"neurossm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
