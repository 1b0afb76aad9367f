"""Training loop, schedule, evaluation metrics, and the precision grid.

Loss is cross entropy plus the configured weight regularizer (spread
penalty on the latent weights, or the grid-attraction cosine term on
the squashed weights). The optimizer is Adam under a warmup-then-decay
schedule. Quantized runs are two-phase: batch statistics feed the
normalization layers for the first half, then running statistics are
recalibrated and frozen so the fold the exporter relies on is the fold
training saw, and the optimizer state restarts for the changed loss
surface.

Determinism contract: given the same seed, dataset, and thread
configuration, two runs produce bit-identical checkpoints. Batches are
drawn with replacement from a dedicated generator, so the draw sequence
does not depend on evaluation cadence.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, InvalidStep, MetricError, TrainingDiverged
from .features import FeatureDataset
from .fxp import select_qformat
from .model import (
    ModelSpec,
    TrainedModel,
    backward,
    cross_entropy,
    forward,
    init_model,
    save_checkpoint,
)
from .quantizers import (
    FakeQuantConfig,
    acr_reg_grad,
    acr_reg_loss,
    sqwd_reg_grad,
    sqwd_reg_loss,
    squash,
    squash_grad,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Desk-scale training hyperparameters."""

    total_steps: int = 5000
    batch_size: int = 32
    peak_lr: float = 1e-3
    final_lr: float = 1e-5
    warmup_fraction: float = 0.10
    fq: FakeQuantConfig = field(default_factory=lambda: FakeQuantConfig(enabled=False))
    seed: int = 0
    freeze_fraction: float = 0.5
    recalib_batches: int = 8
    log_every: int = 100
    eval_every: int = 1000
    eval_subset: int = 256
    checkpoint_every: int | None = None
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise InvalidInput("total_steps must be >= 1")
        if self.batch_size < 1:
            raise InvalidInput("batch_size must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise InvalidInput("warmup_fraction must lie in (0, 1)")
        if self.final_lr > self.peak_lr:
            raise InvalidInput("final_lr must not exceed peak_lr")
        if self.peak_lr <= 0.0:
            raise InvalidInput("peak_lr must be positive")
        if not 0.0 < self.freeze_fraction <= 1.0:
            raise InvalidInput("freeze_fraction must lie in (0, 1]")
        if self.fq.method != "none" and not self.fq.enabled:
            raise InvalidInput(
                "weight regularizers only apply to fake-quant training")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Piecewise-linear schedule: ramp to peak, then decay to final.

    The warmup length rounds to a whole step so the peak is attained
    exactly at one step index.
    """
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise InvalidStep(f"step {step} outside [0, {total}]")
    warmup = min(max(int(round(cfg.warmup_fraction * total)), 1), total)
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    # Anchored at final_lr so the last step hits it exactly; the peak
    # endpoint is owned by the warmup branch.
    frac = (step - warmup) / (total - warmup)
    return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * (1.0 - frac)


# ---------------------------------------------------------------------------
# Regularizers over the whole parameter set
# ---------------------------------------------------------------------------


def _all_raw(model: TrainedModel) -> np.ndarray:
    return np.concatenate([bp.raw_w.ravel() for bp in model.params])


def regularizer_loss(model: TrainedModel) -> float:
    """Method-dispatched penalty, a single mean over every weight."""
    fq = model.fq
    if not fq.enabled or fq.method == "none" or fq.lambda_reg == 0.0:
        return 0.0
    raw = _all_raw(model)
    if fq.method == "sqwd":
        return sqwd_reg_loss(raw, fq.lambda_reg)
    return acr_reg_loss(squash(raw), fq.b_w, fq.lambda_reg)


def regularizer_grads(model: TrainedModel) -> list[np.ndarray] | None:
    """Per-block latent-weight gradients of :func:`regularizer_loss`."""
    fq = model.fq
    if not fq.enabled or fq.method == "none" or fq.lambda_reg == 0.0:
        return None
    n_total = sum(bp.raw_w.size for bp in model.params)
    grads = []
    for bp in model.params:
        frac = bp.raw_w.size / n_total
        if fq.method == "sqwd":
            g = sqwd_reg_grad(bp.raw_w, fq.lambda_reg) * frac
        else:
            w_hat = squash(bp.raw_w)
            g = acr_reg_grad(w_hat, fq.b_w, fq.lambda_reg) * frac
            g = g * squash_grad(bp.raw_w)
        grads.append(g)
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class _Adam:
    """Standard Adam over the model's parameter dictionaries."""

    def __init__(self, model: TrainedModel):
        self.t = 0
        self.m = [dict() for _ in model.params]
        self.v = [dict() for _ in model.params]

    def step(self, model: TrainedModel, grads: list[dict], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for bp, g, m, v in zip(model.params, grads, self.m, self.v):
            for key, grad in g.items():
                if key not in m:
                    m[key] = np.zeros_like(grad)
                    v[key] = np.zeros_like(grad)
                m[key] = ADAM_BETA1 * m[key] + (1.0 - ADAM_BETA1) * grad
                v[key] = ADAM_BETA2 * v[key] + (1.0 - ADAM_BETA2) * grad * grad
                update = lr * (m[key] / bc1) / (np.sqrt(v[key] / bc2) + ADAM_EPS)
                if key == "raw_w":
                    bp.raw_w -= update
                elif key == "bias":
                    bp.bias -= update
                elif key == "gamma":
                    bp.bn.gamma -= update
                elif key == "beta":
                    bp.bn.beta -= update


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _recalibrate_bn(model: TrainedModel, windows: np.ndarray,
                    rng: np.random.Generator, batch_size: int,
                    n_batches: int) -> None:
    """Replace running statistics with fresh batch averages.

    Runs the live-statistics forward pass over seeded batches and sets
    each layer's running mean/var to the plain average of the observed
    batch moments, so the frozen fold matches the current weights.
    """
    sums = [None] * len(model.params)
    for _ in range(n_batches):
        idx = rng.integers(0, windows.shape[0], size=batch_size)
        _, cache = forward(model, windows[idx], train_mode=True,
                           return_cache=True, update_running=False)
        for i, (bp, bcache) in enumerate(zip(model.params, cache["blocks"])):
            if bp.bn is None:
                continue
            z = bcache["pre_bn"]
            mean = z.mean(axis=(0, 1, 2))
            var = z.var(axis=(0, 1, 2))
            if sums[i] is None:
                sums[i] = [np.zeros_like(mean), np.zeros_like(var)]
            sums[i][0] += mean
            sums[i][1] += var
    for bp, acc in zip(model.params, sums):
        if acc is None:
            continue
        bp.bn.running_mean = acc[0] / n_batches
        bp.bn.running_var = acc[1] / n_batches


def _write_log(handle, record: dict) -> None:
    if handle is not None:
        handle.write(json.dumps(record) + "\n")


def train(spec: ModelSpec, dataset: FeatureDataset, cfg: TrainConfig) -> TrainedModel:
    """Train a model on the dataset's train split; returns it frozen.

    Raises TrainingDiverged if the loss leaves the reals. The JSON-lines
    log (cfg.log_path) records step, lr, ce, reg, and periodic
    validation accuracy.
    """
    fq = dataclasses.replace(cfg.fq)
    model = init_model(spec, fq, cfg.seed, stats=dataset.stats)
    if fq.enabled:
        fq.q_in = select_qformat(dataset.stats.max_abs, fq.b_in)
    train_split = dataset.train
    val_split = dataset.val
    windows, labels = train_split.windows, train_split.labels
    batch_rng = np.random.default_rng([cfg.seed, 101])
    recal_rng = np.random.default_rng([cfg.seed, 202])
    adam = _Adam(model)
    has_bn = any(bp.bn is not None for bp in model.params)
    freeze_step = (int(round(cfg.freeze_fraction * cfg.total_steps))
                   if fq.enabled and has_bn and not model.bn_frozen else None)
    handle = open(cfg.log_path, "w") if cfg.log_path else None
    try:
        for step in range(1, cfg.total_steps + 1):
            if freeze_step is not None and step - 1 == freeze_step:
                _recalibrate_bn(model, windows, recal_rng, cfg.batch_size,
                                cfg.recalib_batches)
                model.bn_frozen = True
                adam = _Adam(model)
                _write_log(handle, {"step": step - 1, "event": "bn_frozen"})
            lr = lr_at(step, cfg)
            idx = batch_rng.integers(0, windows.shape[0], size=cfg.batch_size)
            probs, cache = forward(model, windows[idx], train_mode=True,
                                   return_cache=True)
            ce = cross_entropy(probs, labels[idx])
            reg = regularizer_loss(model)
            if not math.isfinite(ce + reg):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: ce={ce}, reg={reg}")
            grads = backward(model, cache, probs, labels[idx])
            reg_grads = regularizer_grads(model)
            if reg_grads is not None:
                for g, rg in zip(grads, reg_grads):
                    g["raw_w"] = g["raw_w"] + rg
            adam.step(model, grads, lr)
            if handle and (step % cfg.log_every == 0 or step == 1
                           or step == cfg.total_steps):
                record = {"step": step, "lr": lr, "ce_loss": ce,
                          "reg_loss": reg}
                if val_split is not None and cfg.eval_every and (
                        step % cfg.eval_every == 0 or step == cfg.total_steps):
                    sub = slice(0, cfg.eval_subset)
                    record["val_accuracy"] = evaluate(
                        model, val_split.windows[sub],
                        val_split.labels[sub]).accuracy
                _write_log(handle, record)
            if (cfg.checkpoint_dir and cfg.checkpoint_every
                    and step % cfg.checkpoint_every == 0):
                save_checkpoint(model, f"{cfg.checkpoint_dir}/step{step:06d}.kwsm")
    finally:
        if handle:
            handle.close()
    if freeze_step is not None and not model.bn_frozen:
        # freeze_fraction == 1.0 schedules the transition after the loop
        _recalibrate_bn(model, windows, recal_rng, cfg.batch_size,
                        cfg.recalib_batches)
        model.bn_frozen = True
    if cfg.checkpoint_dir:
        save_checkpoint(model, f"{cfg.checkpoint_dir}/final.kwsm")
    return model


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    """Accuracy, confusion matrix, and the detection trade-off curve."""

    accuracy: float
    confusion: np.ndarray
    frr: np.ndarray
    fdr: np.ndarray
    relative_fdr: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise InvalidInput(f"accuracy {self.accuracy} outside [0, 1]")


def predict_posteriors(model: TrainedModel, windows: np.ndarray,
                       batch_size: int = 512) -> np.ndarray:
    out = []
    for start in range(0, windows.shape[0], batch_size):
        out.append(forward(model, windows[start:start + batch_size]))
    return np.concatenate(out, axis=0)


def evaluate(model: TrainedModel, windows: np.ndarray, labels: np.ndarray,
             batch_size: int = 512) -> EvalResult:
    """Eval-mode accuracy/confusion, with the DET curve when defined."""
    probs = predict_posteriors(model, windows, batch_size)
    return _result_from_posteriors(probs, labels, model.spec.num_classes)


def _result_from_posteriors(probs: np.ndarray, labels: np.ndarray,
                            num_classes: int) -> EvalResult:
    labels = np.asarray(labels)
    pred = probs.argmax(axis=1)
    accuracy = float(np.mean(pred == labels))
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    try:
        det = det_metrics(probs, labels)
        frr, fdr = det.frr, det.fdr
    except MetricError:
        frr, fdr = np.empty(0), np.empty(0)
    return EvalResult(accuracy=accuracy, confusion=confusion, frr=frr, fdr=fdr)


def det_curve(posteriors: np.ndarray, labels: np.ndarray):
    """Threshold sweep of the keyword detector (class 0 is the negative).

    The detection score is 1 - P(negative). Returns (frr, fdr) arrays
    over all distinct score thresholds, from accept-everything to
    reject-everything.
    """
    labels = np.asarray(labels)
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if posteriors.ndim != 2 or posteriors.shape[0] != labels.shape[0]:
        raise MetricError("posteriors and labels disagree in length")
    positive = labels != 0
    n_pos = int(positive.sum())
    n_neg = int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("DET curve needs both keyword and negative examples")
    scores = 1.0 - posteriors[:, 0]
    order = np.argsort(-scores, kind="stable")
    sorted_pos = positive[order]
    # Detections at threshold = score[k]: the first k+1 examples.
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(~sorted_pos)
    frr = 1.0 - tp / n_pos
    fdr = np.where(tp + fp > 0, fp / np.maximum(tp + fp, 1), 0.0)
    # Prepend the reject-everything operating point.
    frr = np.concatenate([[1.0], frr])
    fdr = np.concatenate([[0.0], fdr])
    return frr, fdr


def _fdr_at(frr_curve: np.ndarray, fdr_curve: np.ndarray, frr: float) -> float:
    """FDR at the tightest threshold whose FRR does not exceed ``frr``.

    FRR is non-increasing along the sweep, so the first qualifying
    index is the operating point that meets the miss-rate target while
    accepting the fewest examples.
    """
    ok = frr_curve <= frr + 1e-12
    if not np.any(ok):
        return float(fdr_curve[np.argmin(frr_curve)])
    return float(fdr_curve[np.nonzero(ok)[0][0]])


def det_metrics(posteriors: np.ndarray, labels: np.ndarray,
                baseline: EvalResult | None = None) -> EvalResult:
    """Detection metrics; with a baseline, the relative FDR at its
    balance point (the FRR where the baseline's FRR and FDR cross).
    """
    labels = np.asarray(labels)
    frr, fdr = det_curve(posteriors, labels)
    num_classes = posteriors.shape[1]
    pred = posteriors.argmax(axis=1)
    accuracy = float(np.mean(pred == labels))
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    relative = None
    if baseline is not None:
        if baseline.frr.size == 0:
            raise MetricError("baseline has no DET curve")
        op = int(np.argmin(np.abs(baseline.frr - baseline.fdr)))
        op_frr = float(baseline.frr[op])
        # Both curves are read through the same lookup so a model
        # compared against itself scores exactly 1.0.
        base_fdr = _fdr_at(baseline.frr, baseline.fdr, op_frr)
        model_fdr = _fdr_at(frr, fdr, op_frr)
        if base_fdr == 0.0:
            relative = 1.0 if model_fdr == 0.0 else math.inf
        else:
            relative = model_fdr / base_fdr
    return EvalResult(accuracy=accuracy, confusion=confusion, frr=frr,
                      fdr=fdr, relative_fdr=relative)


# ---------------------------------------------------------------------------
# Precision grid
# ---------------------------------------------------------------------------


def eval_grid(spec: ModelSpec, dataset: FeatureDataset,
              weight_bits: list[int], act_bits: list[int],
              method: str = "sqwd", base_cfg: TrainConfig | None = None) -> dict:
    """Retrain per (weight, activation) precision cell plus a float
    reference, all from the same seed; returns the accuracy matrix."""
    base = base_cfg or TrainConfig()
    flp_cfg = dataclasses.replace(base, fq=FakeQuantConfig(enabled=False))
    flp_model = train(spec, dataset, flp_cfg)
    test = dataset.test
    flp_acc = evaluate(flp_model, test.windows, test.labels).accuracy
    cells = []
    for b_w in weight_bits:
        for b_a in act_bits:
            fq = FakeQuantConfig(enabled=True, b_w=b_w, b_a=b_a,
                                 b_in=base.fq.b_in, c_a=base.fq.c_a,
                                 method=method)
            cfg = dataclasses.replace(base, fq=fq)
            model = train(spec, dataset, cfg)
            acc = evaluate(model, test.windows, test.labels).accuracy
            cells.append({"b_w": b_w, "b_a": b_a, "accuracy": acc})
    return {"schema": "fxpkws/evalgrid/v1", "method": method,
            "flp_accuracy": flp_acc, "cells": cells}


def format_accuracy_grid(result: dict) -> str:
    """Aligned text matrix: rows weight bits, columns activation bits."""
    cells = result["cells"]
    weight_bits = sorted({c["b_w"] for c in cells})
    act_bits = sorted({c["b_a"] for c in cells})
    lookup = {(c["b_w"], c["b_a"]): c["accuracy"] for c in cells}
    headers = ["w\\a"] + [str(a) for a in act_bits]
    rows = []
    for w in weight_bits:
        row = [str(w)]
        for a in act_bits:
            acc = lookup.get((w, a))
            row.append("-" if acc is None else f"{100.0 * acc:.1f}")
        rows.append(row)
    widths = [max(len(headers[j]), *(len(r[j]) for r in rows))
              for j in range(len(headers))]
    def fmt(cells_):
        return "  ".join(c.rjust(widths[j]) for j, c in enumerate(cells_))
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in rows]
    lines.append(f"FLP reference: {100.0 * result['flp_accuracy']:.1f}")
    return "\n".join(lines)
