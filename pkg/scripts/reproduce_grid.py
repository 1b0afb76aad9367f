#!/usr/bin/env python3
"""Reproduce the Speech Commands v2 accuracy grid at full scale.

Trains a floating-point baseline plus quantization-aware models (SQWD
and ACR, each at 8/8 and 4/4 weight/activation bits) on Google Speech
Commands v2 with the 5-block convolutional model, then compares test
accuracy against the reference targets below. A full run takes hours on
CPU; nothing here executes as part of the regular test suite.

Dataset: download and extract

    http://download.tensorflow.org/data/speech_commands_v0.02.tar.gz

then pass the extracted directory as --data. Features are extracted
once and cached (see --cache) so repeat runs skip the WAV decode.

Usage:

    python3 scripts/reproduce_grid.py --data /path/to/speech_commands_v0.02
    python3 scripts/reproduce_grid.py --data ... --steps 200000 --out grid.json

The reference numbers were obtained with a much larger budget (1M steps
at batch 1500); with the CPU-sized default below expect to land near
the targets rather than dead on them. Raise --steps/--batch-size to
close the gap.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from fxpkws.engine import export_model, save_fxp_model
from fxpkws.features import build_gsc_dataset, load_feature_cache, save_feature_cache
from fxpkws.model import default_spec
from fxpkws.quantizers import FakeQuantConfig
from fxpkws.trainer import TrainConfig, evaluate, train

# (method, weight bits, activation bits, reference accuracy %, allowed band)
TARGETS = [
    ("flp", None, None, 90.7, None),
    ("sqwd", 8, 8, 91.6, 1.5),
    ("acr", 8, 8, 92.8, 1.5),
    ("sqwd", 4, 4, 91.3, 2.0),
    ("acr", 4, 4, 91.8, 2.0),
]


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cell_name(method: str, b_w, b_a) -> str:
    if method == "flp":
        return "flp"
    return f"{method}-w{b_w}a{b_a}"


def load_dataset(args):
    cache = Path(args.cache)
    if cache.is_file():
        log(f"loading cached features from {cache}")
        return load_feature_cache(cache)
    log(f"extracting features from {args.data} (one-time, slow)")
    ds = build_gsc_dataset(args.data, max_per_class=args.max_per_class)
    cache.parent.mkdir(parents=True, exist_ok=True)
    save_feature_cache(cache, ds)
    log(f"cached {len(ds.train)}/{len(ds.val)}/{len(ds.test)} windows to {cache}")
    return ds


def run_cell(ds, spec, args, method, b_w, b_a, out_dir: Path):
    name = cell_name(method, b_w, b_a)
    if method == "flp":
        fq = FakeQuantConfig(enabled=False)
    else:
        fq = FakeQuantConfig(method=method, b_w=b_w, b_a=b_a, b_in=8,
                             c_a=args.activation_clip)
    cfg = TrainConfig(total_steps=args.steps, batch_size=args.batch_size,
                      seed=args.seed, fq=fq,
                      log_path=str(out_dir / f"{name}.log"),
                      eval_every=max(1, args.steps // 20))
    started = time.time()
    tm = train(spec, ds, cfg)
    result = evaluate(tm, ds.test.windows, ds.test.labels)
    minutes = (time.time() - started) / 60.0
    log(f"{name}: test accuracy {result.accuracy:.4f} ({minutes:.1f} min)")
    if fq.enabled:
        save_fxp_model(export_model(tm), out_dir / f"{name}.fxpm")
        log(f"{name}: integer export verified lossless")
    return result.accuracy


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Train the full accuracy grid on Speech Commands v2.")
    parser.add_argument("--data", required=True,
                        help="extracted speech_commands_v0.02 directory")
    parser.add_argument("--out", default="grid_results.json")
    parser.add_argument("--cache", default="gsc_features.fxfc",
                        help="feature cache path (created on first run)")
    parser.add_argument("--steps", type=int, default=60000)
    parser.add_argument("--batch-size", type=int, default=128)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--activation-clip", type=float, default=8.0)
    parser.add_argument("--max-per-class", type=int, default=None,
                        help="cap clips per class per split (dry runs)")
    parser.add_argument("--only", default=None,
                        help="comma-separated cell names, e.g. flp,acr-w8a8")
    parser.add_argument("--strict", action="store_true",
                        help="exit nonzero if any cell misses its band")
    args = parser.parse_args(argv)

    ds = load_dataset(args)
    spec = default_spec(ds.num_classes)
    log(f"{ds.num_classes} classes, {len(ds.train)} training windows, "
        f"{args.steps} steps per cell")

    out_path = Path(args.out)
    out_dir = out_path.parent if out_path.parent != Path("") else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    wanted = None if args.only is None else set(args.only.split(","))

    rows = []
    for method, b_w, b_a, target, band in TARGETS:
        name = cell_name(method, b_w, b_a)
        if wanted is not None and name not in wanted:
            continue
        accuracy = 100.0 * run_cell(ds, spec, args, method, b_w, b_a, out_dir)
        status = "reference"
        if band is not None:
            status = "ok" if abs(accuracy - target) <= band else "miss"
        rows.append({"cell": name, "method": method, "b_w": b_w, "b_a": b_a,
                     "accuracy": round(accuracy, 2), "target": target,
                     "band": band, "status": status})

    print(f"{'cell':<12} {'accuracy':>8} {'target':>7} {'band':>6} status")
    for r in rows:
        band = "-" if r["band"] is None else f"±{r['band']}"
        print(f"{r['cell']:<12} {r['accuracy']:>8.2f} {r['target']:>7.1f} "
              f"{band:>6} {r['status']}")

    payload = {"schema": "fxpkws/reproduction/v1", "steps": args.steps,
               "batch_size": args.batch_size, "seed": args.seed, "cells": rows}
    out_path.write_text(json.dumps(payload, indent=2) + "\n")
    log(f"wrote {out_path}")

    missed = [r["cell"] for r in rows if r["status"] == "miss"]
    if missed:
        log(f"cells outside their band: {', '.join(missed)}")
        if args.strict:
            return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
