"""Command-line pipeline: train, export, infer, profile, eval-grid.

Conventions: logs go to standard error; data (JSON documents or text
tables) goes to standard output or the path given with ``--out``.
Binary artifacts (checkpoints, integer-model containers) are always
written to explicit paths. Every command accepts ``--config FILE``
with a JSON object whose keys are the long option names; unknown keys
are rejected, and command-line flags override file values. The
effective configuration is echoed to the log so runs are auditable.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
error, 3 failed assertion (export verification or the bit-exactness
oracle).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .engine import (
    AccumulatorConfig,
    bit_exact_check,
    export_model,
    export_model_ptq,
    format_saturation_table,
    infer,
    instruction_profile,
    load_fxp_model,
    profile_saturations,
    save_fxp_model,
)
from .errors import (
    ExportError,
    InvalidBN,
    InvalidInput,
    InvalidRescale,
    InvalidStep,
    LayoutError,
    MetricError,
    QFormatError,
    ShapeError,
    TooShort,
    TrainingDiverged,
)
from .features import build_gsc_dataset, build_synth_dataset
from .fxp import dequantize_unit
from .model import (
    default_spec,
    desk_spec,
    effective_block_params,
    load_checkpoint,
    profile_spec,
    save_checkpoint,
    tiny_spec,
)
from .quantizers import FakeQuantConfig
from .trainer import TrainConfig, eval_grid, evaluate, format_accuracy_grid, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ASSERT = 3

_SPECS = {"tiny": tiny_spec, "desk": desk_spec, "profile": profile_spec,
          "full": default_spec}

_DATA_DEFAULTS = {
    "data": "synth",
    "classes": 4,
    "train_per_class": 60,
    "val_per_class": 15,
    "test_per_class": 25,
    "data_seed": 0,
}

_DEFAULTS = {
    "train": {
        **_DATA_DEFAULTS,
        "spec": "desk", "method": "none", "flp": False,
        "bw": 8, "ba": 8, "bin": 8, "clip": 8.0, "lambda_reg": None,
        "steps": 1000, "batch_size": 32, "seed": 0,
        "out": "model.kwsm", "log": None,
    },
    "export": {
        **_DATA_DEFAULTS,
        "checkpoint": None, "out": "model.fxpm", "ptq": False,
        "bw": 8, "ba": 8, "bin": 8, "calib_count": 64,
    },
    "infer": {
        **_DATA_DEFAULTS,
        "model": None, "cadence": "none", "acc_bits": 16,
        "buffer_bits": None, "limit": None, "oracle": False,
        "checkpoint": None, "out": None,
    },
    "profile": {
        **_DATA_DEFAULTS,
        "model": None, "cadences": "none,512,256,128,64,32,16",
        "acc_bits": 16, "limit": 16, "json": False, "out": None,
    },
    "eval-grid": {
        **_DATA_DEFAULTS,
        "spec": "desk", "method": "sqwd", "weight_bits": "8,4",
        "act_bits": "8,4", "bin": 8, "clip": 8.0,
        "steps": 1000, "batch_size": 32, "seed": 0,
        "json": False, "out": None,
    },
}


class _UsageError(Exception):
    """Bad flags, bad config file, or contradictory options."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(text: str, out_path: str | None) -> None:
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
        _log(f"wrote {out_path}")
    else:
        print(text)


def _parse_cadence(token: str):
    token = str(token).strip().lower()
    if token == "none":
        return None
    try:
        value = int(token)
    except ValueError:
        raise _UsageError(f"cadence must be 'none' or a positive integer, got {token!r}")
    if value < 1:
        raise _UsageError(f"cadence must be >= 1, got {value}")
    return value


def _parse_int_list(text: str, name: str) -> list[int]:
    try:
        values = [int(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError:
        raise _UsageError(f"{name} must be comma-separated integers, got {text!r}")
    if not values:
        raise _UsageError(f"{name} is empty")
    return values


def _load_dataset(eff: dict):
    source = eff["data"]
    if source == "synth":
        return build_synth_dataset(
            n_classes=eff["classes"], n_train=eff["train_per_class"],
            n_val=eff["val_per_class"], n_test=eff["test_per_class"],
            seed=eff["data_seed"])
    if isinstance(source, str) and source.startswith("gsc:"):
        return build_gsc_dataset(source[len("gsc:"):])
    raise _UsageError(f"--data must be 'synth' or 'gsc:<dir>', got {source!r}")


def _effective(args: argparse.Namespace, command: str) -> dict:
    """Defaults, overlaid by the config file, overlaid by given flags."""
    eff = dict(_DEFAULTS[command])
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise _UsageError(f"config file is not valid JSON: {e}")
        if not isinstance(file_cfg, dict):
            raise _UsageError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(eff))
        if unknown:
            raise _UsageError(f"unknown config keys: {', '.join(unknown)}")
        eff.update(file_cfg)
    for key in eff:
        value = getattr(args, key, None)
        if value is not None:
            eff[key] = value
    _log(f"config[{command}]: "
         + json.dumps(eff, sort_keys=True, default=str))
    return eff


def _accumulator(eff: dict, cadence) -> AccumulatorConfig:
    acc_bits = eff["acc_bits"]
    buffer_bits = eff.get("buffer_bits") or min(64, max(32, 2 * acc_bits))
    return AccumulatorConfig(acc_bits=acc_bits, buffer_bits=buffer_bits,
                             flush_cadence=cadence)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(eff: dict) -> int:
    if eff["flp"]:
        fq = FakeQuantConfig(enabled=False, method=eff["method"])
    else:
        fq = FakeQuantConfig(enabled=True, b_w=eff["bw"], b_a=eff["ba"],
                             b_in=eff["bin"], c_a=eff["clip"],
                             method=eff["method"], lambda_reg=eff["lambda_reg"])
    cfg = TrainConfig(total_steps=eff["steps"], batch_size=eff["batch_size"],
                      seed=eff["seed"], fq=fq, log_path=eff["log"])
    dataset = _load_dataset(eff)
    spec = _SPECS[eff["spec"]](dataset.num_classes)
    model = train(spec, dataset, cfg)
    save_checkpoint(model, eff["out"])
    acc = evaluate(model, dataset.test.windows, dataset.test.labels).accuracy
    _log(f"test accuracy: {acc:.4f}")
    _log(f"wrote {eff['out']}")
    payload = {"schema": "fxpkws/train/v1", "checkpoint": eff["out"],
               "steps": eff["steps"], "seed": eff["seed"],
               "quantized": not eff["flp"], "method": eff["method"],
               "test_accuracy": acc}
    _emit(json.dumps(payload, indent=2), None)
    return EXIT_OK


def _export_round_trip_error(tm, fxm) -> float:
    """Largest |dequantized code - trained value| over all parameters."""
    worst = 0.0
    for i, layer in enumerate(fxm.layers):
        _, w_q, bias_q = effective_block_params(tm, i)
        w_back = dequantize_unit(layer.weights.array, fxm.b_w)
        worst = max(worst, float(np.abs(w_back - w_q).max()))
        b_back = layer.bias.array * 2.0 ** -layer.bias.q
        worst = max(worst, float(np.abs(b_back - bias_q).max()))
    return worst


def cmd_export(eff: dict) -> int:
    if not eff["checkpoint"]:
        raise _UsageError("export needs a checkpoint path")
    tm = load_checkpoint(eff["checkpoint"])
    if eff["ptq"]:
        dataset = _load_dataset(eff)
        calib = dataset.train.windows[:eff["calib_count"]]
        fxm = export_model_ptq(tm, calib, b_w=eff["bw"], b_a=eff["ba"],
                               b_in=eff["bin"])
        verification = None
    else:
        fxm = export_model(tm)
        verification = _export_round_trip_error(tm, fxm)
        _log(f"max export error: {verification:g}")
    save_fxp_model(fxm, eff["out"])
    _log(f"wrote {eff['out']}")
    layers = [{"layer": i, "q_w": layer.weights.q, "q_x_in": layer.q_x_in,
               "q_acc": layer.bias.q, "q_out": layer.q_out}
              for i, layer in enumerate(fxm.layers)]
    if eff["ptq"]:
        lines = ["layer  q_w  q_x_in  q_acc  q_out"]
        for r in layers:
            q_out = "-" if r["q_out"] is None else str(r["q_out"])
            lines.append(f"{r['layer']:5d}  {r['q_w']:3d}  {r['q_x_in']:6d}"
                         f"  {r['q_acc']:5d}  {q_out:>5s}")
        _log("\n".join(lines))
    payload = {"schema": "fxpkws/export/v1", "path": eff["out"],
               "mode": fxm.mode, "b_w": fxm.b_w, "b_a": fxm.b_a,
               "b_in": fxm.b_in, "q_in": fxm.q_in,
               "max_export_error": verification, "layers": layers}
    _emit(json.dumps(payload, indent=2), None)
    if verification is not None and verification != 0.0:
        _log("export verification FAILED: codes do not reproduce training values")
        return EXIT_ASSERT
    return EXIT_OK


def cmd_infer(eff: dict) -> int:
    if not eff["model"]:
        raise _UsageError("infer needs a model path")
    cadence = _parse_cadence(eff["cadence"])
    cfg = _accumulator(eff, cadence)
    fxm = load_fxp_model(eff["model"])
    dataset = _load_dataset(eff)
    windows = dataset.test.windows
    labels = dataset.test.labels
    if eff["limit"]:
        windows, labels = windows[:eff["limit"]], labels[:eff["limit"]]
    probs, report = infer(fxm, windows, cfg)
    predictions = probs.argmax(axis=1)
    accuracy = float(np.mean(predictions == labels))
    _log(f"inferred {windows.shape[0]} windows, accuracy {accuracy:.4f}, "
         f"corrupted {report.total_corrupted}")
    oracle = None
    if eff["oracle"]:
        if not eff["checkpoint"]:
            raise _UsageError("--oracle needs --checkpoint for the float reference")
        tm = load_checkpoint(eff["checkpoint"])
        oracle = bit_exact_check(tm, fxm, windows)
        _log(f"bit-exact: {str(oracle.bit_exact).lower()}")
        if not oracle.bit_exact:
            _log(oracle.detail)
    payload = {"schema": "fxpkws/infer/v1", "model": eff["model"],
               "cadence": cadence, "acc_bits": cfg.acc_bits,
               "accuracy": accuracy,
               "predictions": predictions.tolist(),
               "report": report.to_json(),
               "oracle": oracle.to_json() if oracle else None}
    _emit(json.dumps(payload, indent=2), eff["out"])
    if oracle is not None and not oracle.bit_exact:
        return EXIT_ASSERT
    return EXIT_OK


def cmd_profile(eff: dict) -> int:
    if not eff["model"]:
        raise _UsageError("profile needs a model path")
    cadences = [_parse_cadence(tok) for tok in str(eff["cadences"]).split(",")]
    fxm = load_fxp_model(eff["model"])
    dataset = _load_dataset(eff)
    windows = dataset.test.windows
    if eff["limit"]:
        windows = windows[:eff["limit"]]
    reports = profile_saturations(fxm, windows, cadences,
                                  acc_bits=eff["acc_bits"])
    profiles = {}
    for cadence in cadences:
        cfg = AccumulatorConfig(acc_bits=eff["acc_bits"],
                                buffer_bits=min(64, max(32, 2 * eff["acc_bits"])),
                                flush_cadence=cadence)
        profiles[cadence] = instruction_profile(fxm, windows.shape[0], cfg)
    if eff["json"]:
        def key(c):
            return "none" if c is None else str(c)
        payload = {"schema": "fxpkws/profile/v1", "model": eff["model"],
                   "inputs": int(windows.shape[0]),
                   "saturation": {key(c): reports[c].to_json() for c in cadences},
                   "instructions": {key(c): profiles[c].to_json() for c in cadences}}
        _emit(json.dumps(payload, indent=2), eff["out"])
    else:
        lines = [format_saturation_table(reports), ""]
        lines.append("cadence     cycles  relative_exec_time")
        for cadence in cadences:
            p = profiles[cadence]
            tag = "none" if cadence is None else str(cadence)
            lines.append(f"{tag:>7s}  {p.cycles:9.0f}  {p.relative_exec_time:18.4f}")
        _emit("\n".join(lines), eff["out"])
    return EXIT_OK


def cmd_eval_grid(eff: dict) -> int:
    fq = FakeQuantConfig(enabled=True, b_in=eff["bin"], c_a=eff["clip"],
                         method=eff["method"])
    base = TrainConfig(total_steps=eff["steps"], batch_size=eff["batch_size"],
                       seed=eff["seed"], fq=fq)
    weight_bits = _parse_int_list(eff["weight_bits"], "--weight-bits")
    act_bits = _parse_int_list(eff["act_bits"], "--act-bits")
    dataset = _load_dataset(eff)
    spec = _SPECS[eff["spec"]](dataset.num_classes)
    result = eval_grid(spec, dataset, weight_bits, act_bits,
                       method=eff["method"], base_cfg=base)
    if eff["json"]:
        _emit(json.dumps(result, indent=2), eff["out"])
    else:
        _emit(format_accuracy_grid(result), eff["out"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_data_flags(p: _Parser) -> None:
    p.add_argument("--data", help="'synth' or 'gsc:<dir>'")
    p.add_argument("--classes", type=int)
    p.add_argument("--train-per-class", type=int, dest="train_per_class")
    p.add_argument("--val-per-class", type=int, dest="val_per_class")
    p.add_argument("--test-per-class", type=int, dest="test_per_class")
    p.add_argument("--data-seed", type=int, dest="data_seed")


def build_parser() -> _Parser:
    parser = _Parser(prog="fxpkws", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config")
    _add_data_flags(p)
    p.add_argument("--spec", choices=sorted(_SPECS))
    p.add_argument("--method", choices=["sqwd", "acr", "none"])
    p.add_argument("--flp", action="store_true", default=None,
                   help="train the floating-point baseline (no fake quant)")
    p.add_argument("--bw", type=int, help="weight bits")
    p.add_argument("--ba", type=int, help="activation bits")
    p.add_argument("--bin", type=int, help="feature bits")
    p.add_argument("--clip", type=float, help="activation clip c_a")
    p.add_argument("--lambda-reg", type=float, dest="lambda_reg")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--log", help="JSON-lines training log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="export a checkpoint to integer form")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--config")
    _add_data_flags(p)
    p.add_argument("--out")
    p.add_argument("--ptq", action="store_true", default=None,
                   help="post-training quantization of a float checkpoint")
    p.add_argument("--bw", type=int)
    p.add_argument("--ba", type=int)
    p.add_argument("--bin", type=int)
    p.add_argument("--calib-count", type=int, dest="calib_count")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("infer", help="integer inference over a feature set")
    p.add_argument("model", nargs="?")
    p.add_argument("--config")
    _add_data_flags(p)
    p.add_argument("--cadence", help="'none' or flush cadence in MACs")
    p.add_argument("--acc-bits", type=int, dest="acc_bits")
    p.add_argument("--buffer-bits", type=int, dest="buffer_bits")
    p.add_argument("--limit", type=int, help="use only the first N windows")
    p.add_argument("--oracle", action="store_true", default=None,
                   help="assert bit-exact match against the float reference")
    p.add_argument("--checkpoint", help="float checkpoint for --oracle")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("profile", help="saturation and instruction profile")
    p.add_argument("model", nargs="?")
    p.add_argument("--config")
    _add_data_flags(p)
    p.add_argument("--cadences", help="comma list, e.g. none,512,256")
    p.add_argument("--acc-bits", type=int, dest="acc_bits")
    p.add_argument("--limit", type=int)
    p.add_argument("--json", action="store_true", default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("eval-grid", help="retrain per precision cell")
    p.add_argument("--config")
    _add_data_flags(p)
    p.add_argument("--spec", choices=sorted(_SPECS))
    p.add_argument("--method", choices=["sqwd", "acr", "none"])
    p.add_argument("--weight-bits", dest="weight_bits", help="comma list")
    p.add_argument("--act-bits", dest="act_bits", help="comma list")
    p.add_argument("--bin", type=int)
    p.add_argument("--clip", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--json", action="store_true", default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_grid)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        eff = _effective(args, args.command)
        return args.func(eff)
    except _UsageError as e:
        _log(f"usage error: {e}")
        return EXIT_USAGE
    except (InvalidInput, InvalidStep, QFormatError) as e:
        _log(f"invalid configuration: {e}")
        return EXIT_USAGE
    except (OSError, LayoutError, TooShort, InvalidBN, ExportError,
            ShapeError, MetricError, TrainingDiverged, InvalidRescale) as e:
        _log(f"data error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
