"""Pure-integer inference: export, saturating MACs, profiling.

The engine reproduces the trained fake-quant forward pass exactly in
integer arithmetic. Weight codes carry q = b_w - 1 (unit grid),
activation codes q_a, and each MAC chain accumulates products at
q_acc = weights.q + input.q. A narrow saturating accumulator
(``acc_bits``, default 16) processes products in receptive-field order
(kernel rows, kernel columns, input channels); with a flush cadence k,
the accumulator drains into a wide buffer (``buffer_bits``) every k
MACs, which is the two-tier scheme that trades extra flush instructions
for saturation headroom. Flushing never changes the result unless a
clamp actually fires, so the clean path is plain integer summation.

The vectorized kernel computes unclamped prefix sums to detect, per
output activation, whether any accumulator or buffer clamp would fire;
only flagged activations are replayed step by step with real clamping.
Detection is exact because clamped and unclamped sequences agree up to
the first clamp event.

Accounting conventions (the cycle model is an abstraction, not a
benchmark): a model trained with one shared q-format per tensor role
needs no per-layer activation normalization, so QAT-uniform profiles
charge zero normalization ops; per-layer (PTQ) models charge one
normalization op per intermediate activation element because the
pipeline must apply a layer-specific shift there. The runtime
``normalize_qformat`` helper charges a counter only when it actually
shifts codes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import ExportError, InvalidInput, LayoutError, QFormatError, ShapeError
from .fxp import (
    FxpTensor,
    check_bits,
    code_bounds,
    dequantize_unit,
    quantize_qformat,
    quantize_unit,
    rescale,
    select_qformat,
)
from .model import (
    BIAS_BITS,
    ModelSpec,
    StandardizationStats,
    TrainedModel,
    _im2col,
    _spec_from_json,
    _spec_to_json,
    conv_forward,
    effective_block_params,
    fold_batchnorm,
    forward,
    softmax,
)
from .quantizers import squash

FXPM_MAGIC = b"FXPM"
FXPM_VERSION = 1

MODE_QAT = "qat_uniform"
MODE_PTQ = "ptq_per_layer"

# Cycle-model weights: MACs issue ``degree`` per cycle, flushes and
# rescale stores one per cycle, per-layer normalization two (shift
# + store with a layer-dependent amount), loads are dual-issued with
# MACs and charged zero.
CYCLE_WEIGHTS = {"flush": 1.0, "normalization": 2.0, "rescale": 1.0, "load_store": 0.0}


@dataclass(frozen=True)
class AccumulatorConfig:
    """Narrow accumulator width, wide buffer width, flush cadence."""

    acc_bits: int = 16
    buffer_bits: int = 32
    flush_cadence: int | None = None

    def __post_init__(self):
        check_bits(self.acc_bits, wide=True)
        if not isinstance(self.buffer_bits, (int, np.integer)) or isinstance(self.buffer_bits, bool):
            raise InvalidInput(f"buffer width must be an integer, got {self.buffer_bits!r}")
        if not self.acc_bits < self.buffer_bits <= 64:
            raise InvalidInput(
                f"buffer width {self.buffer_bits} must exceed acc width "
                f"{self.acc_bits} and fit 64 bits")
        if self.flush_cadence is not None and self.flush_cadence < 1:
            raise InvalidInput("flush cadence must be >= 1 when set")


def _wide_bounds(bits: int) -> tuple[int, int]:
    """Signed bounds for buffer widths, which may exceed the 32-bit cap
    that code_bounds enforces for storable tensors."""
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class MacResult:
    """Final sum plus clamp-event counts at each tier."""

    value: int
    saturations: int
    buffer_saturations: int = 0


def mac_kernel(w_codes, x_codes, cfg: AccumulatorConfig) -> MacResult:
    """Sequential saturating MAC chain; the reference the vector path must match.

    Products w_i * x_i enter a saturating ``acc_bits`` accumulator one at
    a time; every ``flush_cadence`` MACs the accumulator drains into the
    saturating ``buffer_bits`` buffer and resets. The result is the
    buffer plus whatever remains in the accumulator.
    """
    w = np.asarray(w_codes, dtype=np.int64).ravel()
    x = np.asarray(x_codes, dtype=np.int64).ravel()
    if w.shape != x.shape:
        raise ShapeError(f"operand length mismatch: {w.shape} vs {x.shape}")
    lo_a, hi_a = code_bounds(cfg.acc_bits)
    lo_b, hi_b = _wide_bounds(cfg.buffer_bits)
    acc = 0
    buf = 0
    sats = 0
    buf_sats = 0
    for j in range(w.size):
        raw = acc + int(w[j]) * int(x[j])
        acc = min(max(raw, lo_a), hi_a)
        sats += acc != raw
        if cfg.flush_cadence is not None and (j + 1) % cfg.flush_cadence == 0:
            raw_b = buf + acc
            buf = min(max(raw_b, lo_b), hi_b)
            buf_sats += buf != raw_b
            acc = 0
    raw_b = buf + acc
    buf = min(max(raw_b, lo_b), hi_b)
    buf_sats += buf != raw_b
    return MacResult(value=buf, saturations=sats, buffer_saturations=buf_sats)


# ---------------------------------------------------------------------------
# Exported model
# ---------------------------------------------------------------------------


@dataclass
class LayerFxp:
    """One integer conv block: codes plus the q-formats around it."""

    weights: FxpTensor
    bias: FxpTensor
    stride: tuple[int, int]
    activate: bool
    q_x_in: int
    q_out: int | None

    @property
    def q_acc(self) -> int:
        return self.weights.q + self.q_x_in

    def __post_init__(self):
        if self.bias.q != self.q_acc:
            raise QFormatError(
                f"bias q={self.bias.q} must equal product q={self.q_acc}")
        if self.activate and self.q_out is None:
            raise QFormatError("activated layer needs an output q-format")


@dataclass
class FxpModel:
    """Integer model: geometry, per-layer codes, shared bit-widths."""

    spec: ModelSpec
    layers: list[LayerFxp]
    mode: str
    b_w: int
    b_a: int
    b_in: int
    q_in: int
    c_a: float
    stats: StandardizationStats | None = None

    def __post_init__(self):
        if self.mode not in (MODE_QAT, MODE_PTQ):
            raise InvalidInput(f"unknown mode {self.mode!r}")
        if len(self.layers) != len(self.spec.blocks):
            raise ShapeError("one integer layer per block required")
        if self.mode == MODE_QAT:
            qs_w = {layer.weights.q for layer in self.layers}
            qs_out = {layer.q_out for layer in self.layers if layer.activate}
            if len(qs_w) != 1 or len(qs_out) > 1:
                raise QFormatError("uniform mode requires one q-format per tensor role")

    @property
    def operand_bits(self) -> int:
        return max(self.b_w, self.b_a, self.b_in)


def export_model(tm: TrainedModel) -> FxpModel:
    """Lossless integer export of a quantization-trained model.

    The codes come from the same folded effective parameters the frozen
    training forward multiplies, and every tensor is verified to
    dequantize back to those values exactly; any mismatch aborts the
    export rather than shipping a model that disagrees with training.
    """
    fq = tm.fq
    if not fq.enabled:
        raise ExportError("model trained without fake quantization; use the PTQ export")
    if not tm.bn_frozen:
        raise ExportError("freeze batch-norm statistics before export")
    if fq.q_in is None:
        raise ExportError("q_in unset; attach standardization stats first")
    layers = []
    for i, blk in enumerate(tm.spec.blocks):
        w_fold_pre, w_q, bias_q = effective_block_params(tm, i)
        w_codes = quantize_unit(np.clip(w_fold_pre, -1.0, 1.0), fq.b_w)
        if not np.array_equal(dequantize_unit(w_codes, fq.b_w), w_q):
            raise ExportError(f"block {i}: weight codes do not reproduce training values")
        q_acc = tm.acc_qformat(i)
        b_codes = quantize_qformat(bias_q, BIAS_BITS, q_acc)
        if not np.array_equal(b_codes * 2.0 ** -q_acc, bias_q):
            raise ExportError(f"block {i}: bias codes do not reproduce training values")
        layers.append(LayerFxp(
            weights=FxpTensor(codes=w_codes, shape=w_codes.shape, bits=fq.b_w, q=fq.b_w - 1),
            bias=FxpTensor(codes=b_codes, shape=b_codes.shape, bits=BIAS_BITS, q=q_acc),
            stride=blk.stride,
            activate=blk.activate,
            q_x_in=fq.q_in if i == 0 else fq.q_a,
            q_out=fq.q_a if blk.activate else None,
        ))
    return FxpModel(spec=tm.spec, layers=layers, mode=MODE_QAT, b_w=fq.b_w,
                    b_a=fq.b_a, b_in=fq.b_in, q_in=fq.q_in, c_a=fq.c_a, stats=tm.stats)


def export_model_ptq(tm: TrainedModel, calibration: np.ndarray,
                     b_w: int = 8, b_a: int = 8, b_in: int = 8) -> FxpModel:
    """Post-training quantization of a float-trained model.

    Batch norm folds into the weights, then each layer picks its own
    weight q-format from its folded range and its activation q-format
    from a float calibration pass, so consecutive layers generally
    disagree and inference pays per-layer normalization shifts.
    """
    check_bits(b_w)
    check_bits(b_a)
    check_bits(b_in)
    if tm.stats is None:
        raise ExportError("PTQ export needs standardization stats for the input grid")
    calibration = np.asarray(calibration, dtype=np.float64)
    h, w, c = tm.spec.input_shape
    if calibration.ndim != 3 or calibration.shape[1:] != (h, w) or c != 1:
        raise InvalidInput(f"calibration windows must be (n, {h}, {w})")
    q_in = select_qformat(tm.stats.max_abs, b_in)
    folded = []
    for i, bp in enumerate(tm.params):
        w = squash(bp.raw_w) if tm.fq.enabled else bp.raw_w
        if bp.bn is not None:
            w_f, b_f = fold_batchnorm(w, bp.bias, bp.bn)
        else:
            w_f, b_f = w, bp.bias
        folded.append((w_f, b_f))
    # Float calibration: folded network with plain ReLU.
    act_max = []
    x = calibration[..., None]
    for i, blk in enumerate(tm.spec.blocks):
        w_f, b_f = folded[i]
        z = conv_forward(x, w_f, blk.stride) + b_f
        x = np.maximum(z, 0.0) if blk.activate else z
        act_max.append(float(np.abs(x).max()))
    layers = []
    q_prev = q_in
    for i, blk in enumerate(tm.spec.blocks):
        w_f, b_f = folded[i]
        q_w = select_qformat(float(np.abs(w_f).max()) if np.any(w_f) else 1.0, b_w)
        w_codes = quantize_qformat(w_f, b_w, q_w)
        q_acc = q_w + q_prev
        b_codes = quantize_qformat(b_f, BIAS_BITS, q_acc)
        # q_out never exceeds q_acc: the accumulator grid bounds the
        # information available, and rescale only shifts down.
        q_out = (min(select_qformat(max(act_max[i], 2.0 ** -q_acc), b_a), q_acc)
                 if blk.activate else None)
        layers.append(LayerFxp(
            weights=FxpTensor(codes=w_codes, shape=w_codes.shape, bits=b_w, q=q_w),
            bias=FxpTensor(codes=b_codes, shape=b_codes.shape, bits=BIAS_BITS, q=q_acc),
            stride=blk.stride,
            activate=blk.activate,
            q_x_in=q_prev,
            q_out=q_out,
        ))
        if blk.activate:
            q_prev = q_out
    return FxpModel(spec=tm.spec, layers=layers, mode=MODE_PTQ, b_w=b_w, b_a=b_a,
                    b_in=b_in, q_in=q_in, c_a=tm.fq.c_a, stats=tm.stats)


# ---------------------------------------------------------------------------
# Integer convolution
# ---------------------------------------------------------------------------

# Cap on the elements of one product tensor chunk (memory control).
_CHUNK_ELEMENTS = 6_000_000


@dataclass
class LayerRunStats:
    """Per-layer clamp outcome of one conv_fxp call."""

    corrupted: int = 0
    buffer_saturated: int = 0
    activations: int = 0


def _replay_clamped(rows: np.ndarray, cfg: AccumulatorConfig):
    """Stepwise clamped simulation of (n, macs) product rows.

    Vector over rows, sequential over MACs; semantics identical to
    mac_kernel per row. Returns (values, acc_event_counts, buf_event_counts).
    """
    n, k_total = rows.shape
    lo_a, hi_a = code_bounds(cfg.acc_bits)
    lo_b, hi_b = _wide_bounds(cfg.buffer_bits)
    acc = np.zeros(n, dtype=np.int64)
    buf = np.zeros(n, dtype=np.int64)
    acc_events = np.zeros(n, dtype=np.int64)
    buf_events = np.zeros(n, dtype=np.int64)
    for j in range(k_total):
        raw = acc + rows[:, j]
        acc = np.clip(raw, lo_a, hi_a)
        acc_events += acc != raw
        if cfg.flush_cadence is not None and (j + 1) % cfg.flush_cadence == 0:
            raw_b = buf + acc
            buf = np.clip(raw_b, lo_b, hi_b)
            buf_events += buf != raw_b
            acc[:] = 0
    raw_b = buf + acc
    buf = np.clip(raw_b, lo_b, hi_b)
    buf_events += buf != raw_b
    return buf, acc_events, buf_events


def _mac_chains(cols: np.ndarray, w2: np.ndarray, cfg: AccumulatorConfig):
    """Saturating MAC chains for an im2col block.

    cols: (positions, macs) input codes, w2: (macs, out_ch) weight codes.
    Returns (values (positions, out_ch), corrupted mask, buffer-sat mask),
    bit-identical to running mac_kernel per (position, channel).
    """
    lo_a, hi_a = code_bounds(cfg.acc_bits)
    lo_b, hi_b = _wide_bounds(cfg.buffer_bits)
    n_pos, n_macs = cols.shape
    n_out = w2.shape[1]
    # (positions, out_ch, macs) products in receptive-field order.
    prod = cols[:, None, :] * w2.T[None, :, :]
    ps = np.cumsum(prod, axis=2)
    cadence = cfg.flush_cadence
    if cadence is None:
        acc_dirty = np.any((ps > hi_a) | (ps < lo_a), axis=2)
        buf_dirty = np.zeros_like(acc_dirty)
        totals = ps[:, :, -1]
        # The final accumulator content moves into the buffer once.
        buf_dirty |= (totals > hi_b) | (totals < lo_b)
    else:
        n_seg = -(-n_macs // cadence)
        pad = n_seg * cadence - n_macs
        if pad:
            ps_pad = np.concatenate(
                [ps, np.repeat(ps[:, :, -1:], pad, axis=2)], axis=2)
        else:
            ps_pad = ps
        seg = ps_pad.reshape(n_pos, n_out, n_seg, cadence)
        base = np.concatenate(
            [np.zeros((n_pos, n_out, 1), dtype=np.int64), seg[:, :, :-1, -1]], axis=2)
        within = seg - base[:, :, :, None]
        acc_dirty = np.any((within > hi_a) | (within < lo_a), axis=(2, 3))
        seg_sums = within[:, :, :, -1]
        buf_prefix = np.cumsum(seg_sums, axis=2)
        buf_dirty = np.any((buf_prefix > hi_b) | (buf_prefix < lo_b), axis=2)
        totals = ps[:, :, -1]
    values = totals.copy()
    replay_mask = acc_dirty | buf_dirty
    if np.any(replay_mask):
        rows = prod[replay_mask]
        rep_values, acc_events, buf_events = _replay_clamped(rows, cfg)
        values[replay_mask] = rep_values
        acc_dirty[replay_mask] = acc_events > 0
        buf_dirty[replay_mask] = buf_events > 0
    return values, acc_dirty, buf_dirty


def conv_fxp(layer: LayerFxp, x: FxpTensor, cfg: AccumulatorConfig,
             b_a: int, c_a: float):
    """One integer block: MACs, bias into the buffer, clipped ReLU, rescale.

    Input codes must already sit at the layer's expected q-format. The
    activation is ReLU followed by a saturating rescale to (b_a, q_out);
    clipping the product first at c_a * 2^q_acc gives the same codes
    because the rounded shift is monotone, so the single rescale serves
    both the clip-trained and plain-ReLU (PTQ) semantics.
    """
    if x.q != layer.q_x_in:
        raise QFormatError(
            f"input q={x.q}, layer expects q={layer.q_x_in}; normalize first")
    if len(x.shape) != 4:
        raise ShapeError(f"expected (batch, h, w, ch) codes, got {x.shape}")
    x4 = x.array.astype(np.int64)
    kh, kw, cin, cout = layer.weights.shape
    w2 = layer.weights.array.reshape(kh * kw * cin, cout).astype(np.int64)
    cols = _im2col(x4, (kh, kw), layer.stride)
    batch, oh, ow, n_macs = cols.shape
    cols2 = cols.reshape(batch * oh * ow, n_macs)
    lo_b, hi_b = _wide_bounds(cfg.buffer_bits)
    stats = LayerRunStats(activations=batch * oh * ow * cout)
    values = np.empty((batch * oh * ow, cout), dtype=np.int64)
    chunk = max(1, _CHUNK_ELEMENTS // max(1, n_macs * cout))
    bias = layer.bias.array.astype(np.int64)
    for start in range(0, cols2.shape[0], chunk):
        part = slice(start, start + chunk)
        vals, acc_dirty, buf_dirty = _mac_chains(cols2[part], w2, cfg)
        raw_b = vals + bias[None, :]
        clamped = np.clip(raw_b, lo_b, hi_b)
        buf_dirty |= clamped != raw_b
        values[part] = clamped
        stats.corrupted += int(acc_dirty.sum())
        stats.buffer_saturated += int(buf_dirty.sum())
    out4 = values.reshape(batch, oh, ow, cout)
    q_acc = layer.q_acc
    if layer.activate:
        act = np.maximum(out4, 0)
        codes = rescale(act, q_acc, layer.q_out, b_a)
        out = FxpTensor(codes=codes, shape=codes.shape, bits=b_a, q=layer.q_out)
    else:
        # Logits stay at the wide format; FxpTensor re-checks the range.
        out = FxpTensor(codes=out4, shape=out4.shape, bits=BIAS_BITS, q=q_acc)
    return out, stats


def normalize_qformat(t: FxpTensor, q_to: int, counter: dict | None = None) -> FxpTensor:
    """Shift activation codes to another q-format (PTQ layer boundaries).

    Identity when the formats already agree, charging nothing; an actual
    shift charges one normalization op per element to ``counter``.
    Up-shifts are rejected by the underlying rescale.
    """
    if q_to == t.q:
        return t
    codes = rescale(t.array, t.q, q_to, t.bits)
    if counter is not None:
        counter["normalization_ops"] = counter.get("normalization_ops", 0) + codes.size
    return FxpTensor(codes=codes, shape=codes.shape, bits=t.bits, q=q_to)


# ---------------------------------------------------------------------------
# Full-model inference
# ---------------------------------------------------------------------------


@dataclass
class LayerSatRow:
    """One saturation-table row: topology plus clamp counts."""

    kernel: tuple[int, int]
    macs_per_activation: int
    activations_per_input: int
    corrupted: int = 0
    buffer_saturated: int = 0


@dataclass
class SaturationReport:
    """Per-layer corrupted-activation counts for one accumulator config."""

    acc_bits: int
    buffer_bits: int
    cadence: int | None
    inputs: int
    rows: list[LayerSatRow] = field(default_factory=list)

    @property
    def total_corrupted(self) -> int:
        return sum(r.corrupted for r in self.rows)

    @property
    def total_buffer_saturated(self) -> int:
        return sum(r.buffer_saturated for r in self.rows)

    def to_json(self) -> dict:
        return {
            "acc_bits": self.acc_bits,
            "buffer_bits": self.buffer_bits,
            "cadence": self.cadence,
            "inputs": self.inputs,
            "layers": [
                {"kernel": list(r.kernel), "macs_per_activation": r.macs_per_activation,
                 "activations_per_input": r.activations_per_input,
                 "corrupted": r.corrupted, "buffer_saturated": r.buffer_saturated}
                for r in self.rows
            ],
            "total_corrupted": self.total_corrupted,
            "total_buffer_saturated": self.total_buffer_saturated,
        }


def infer(m: FxpModel, features: np.ndarray,
          cfg: AccumulatorConfig | None = None):
    """Standardized feature windows -> (posteriors, SaturationReport).

    Features are quantized once to the (b_in, q_in) grid, every block
    runs in integer arithmetic, and only the final logits return to real
    numbers for the softmax.
    """
    cfg = cfg or AccumulatorConfig()
    feats = np.asarray(features, dtype=np.float64)
    single = feats.ndim == 2
    if single:
        feats = feats[None]
    h, w, c = m.spec.input_shape
    if feats.shape[1:] != (h, w) or c != 1:
        raise ShapeError(f"expected (n, {h}, {w}) features, got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise InvalidInput("features must be finite")
    codes = quantize_qformat(feats, m.b_in, m.q_in)
    x = FxpTensor(codes=codes[..., None], shape=(*feats.shape, 1), bits=m.b_in, q=m.q_in)
    report = SaturationReport(acc_bits=cfg.acc_bits, buffer_bits=cfg.buffer_bits,
                              cadence=cfg.flush_cadence, inputs=feats.shape[0])
    counts = m.spec.activation_counts()
    for i, (blk, layer) in enumerate(zip(m.spec.blocks, m.layers)):
        if m.mode == MODE_PTQ:
            x = normalize_qformat(x, layer.q_x_in)
        x, stats = conv_fxp(layer, x, cfg, m.b_a, m.c_a)
        report.rows.append(LayerSatRow(
            kernel=blk.kernel,
            macs_per_activation=blk.macs_per_activation,
            activations_per_input=counts[i],
            corrupted=stats.corrupted,
            buffer_saturated=stats.buffer_saturated,
        ))
    logits = x.real.reshape(feats.shape[0], m.spec.num_classes)
    probs = softmax(logits)
    if single:
        return probs[0], report
    return probs, report


@dataclass(frozen=True)
class OracleResult:
    """Outcome of comparing integer inference against the float pass."""

    bit_exact: bool
    layer: int | None = None
    mismatches: int = 0
    detail: str = ""

    def to_json(self) -> dict:
        return {"bit_exact": self.bit_exact, "layer": self.layer,
                "mismatches": self.mismatches, "detail": self.detail}


def bit_exact_check(tm: TrainedModel, m: FxpModel, features: np.ndarray,
                    cfg: AccumulatorConfig | None = None) -> OracleResult:
    """Layer-by-layer code comparison of integer vs fake-quant inference.

    The float reference is the frozen training forward; its activations
    sit on the (b_a, q_a) grid, so scaling by 2^q must land on integers
    that the engine reproduces exactly when nothing saturates. Defaults
    to a wide accumulator (32/64, no cadence) so saturation cannot blur
    the comparison. On mismatch the result names the first diverging
    layer and position.
    """
    if m.mode != MODE_QAT:
        raise InvalidInput("oracle compares the uniform-format export only")
    if not tm.fq.enabled or not tm.bn_frozen:
        raise ExportError("oracle needs the frozen fake-quant checkpoint")
    cfg = cfg or AccumulatorConfig(acc_bits=32, buffer_bits=64)
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    _, cache = forward(tm, feats, return_cache=True)
    codes = quantize_qformat(feats, m.b_in, m.q_in)
    x = FxpTensor(codes=codes[..., None], shape=(*feats.shape, 1),
                  bits=m.b_in, q=m.q_in)
    for i, layer in enumerate(m.layers):
        x, _ = conv_fxp(layer, x, cfg, m.b_a, m.c_a)
        q = layer.q_out if layer.activate else layer.q_acc
        ref = cache["blocks"][i]["out"] * 2.0 ** q
        got = x.array.astype(np.float64)
        if not np.array_equal(got, ref):
            bad = np.argwhere(got != ref)
            pos = tuple(int(v) for v in bad[0])
            detail = (f"layer {i}: {bad.shape[0]} of {got.size} codes differ; "
                      f"first at {pos}: expected {ref[pos]}, got {got[pos]}")
            return OracleResult(bit_exact=False, layer=i,
                                mismatches=int(bad.shape[0]), detail=detail)
    return OracleResult(bit_exact=True)


def profile_saturations(m: FxpModel, windows: np.ndarray,
                        cadences: list[int | None],
                        acc_bits: int = 16) -> dict:
    """Run one inference sweep per cadence and collect the clamp counts."""
    reports = {}
    for cadence in cadences:
        cfg = AccumulatorConfig(acc_bits=acc_bits, flush_cadence=cadence)
        _, report = infer(m, windows, cfg)
        reports[cadence] = report
    return reports


def format_saturation_table(reports: dict) -> str:
    """Aligned text table: layer topology rows, one corrupted column per cadence.

    Mirrors the usual presentation: kernel size, MACs per activation,
    activation count, then corrupted-activation counts per cadence with
    a TOTAL row.
    """
    if not reports:
        raise InvalidInput("no reports to format")
    cadences = list(reports)
    first = reports[cadences[0]]
    headers = (["kernel", "MACs/act", "#acts"]
               + [f"cad={c if c is not None else 'none'}" for c in cadences])
    rows = []
    for i, row in enumerate(first.rows):
        cells = [f"{row.kernel[0]}x{row.kernel[1]}",
                 str(row.macs_per_activation),
                 str(row.activations_per_input)]
        for c in cadences:
            cells.append(str(reports[c].rows[i].corrupted))
        rows.append(cells)
    total = ["TOTAL", "", ""] + [str(reports[c].total_corrupted) for c in cadences]
    rows.append(total)
    widths = [max(len(headers[j]), *(len(r[j]) for r in rows)) for j in range(len(headers))]
    def fmt(cells):
        return "  ".join(c.rjust(widths[j]) for j, c in enumerate(cells))
    lines = [fmt(headers), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Instruction / cycle model
# ---------------------------------------------------------------------------


@dataclass
class InstructionProfile:
    """Analytic op counts and the weighted cycle estimate."""

    mac_ops: int
    flush_ops: int
    normalization_ops: int
    rescale_ops: int
    load_store_ops: int
    degree: int
    cycles: float
    relative_exec_time: float

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "mac_ops", "flush_ops", "normalization_ops", "rescale_ops",
            "load_store_ops", "degree", "cycles", "relative_exec_time")}


def simd_degree(operand_bits: int, acc_bits: int) -> int:
    """Modeled MACs per cycle: 8 for byte operands into a 16-bit
    accumulator, 4 for 16-bit operands, 1 otherwise (float reference)."""
    if operand_bits <= 8 and acc_bits <= 16:
        return 8
    if operand_bits <= 16:
        return 4
    return 1


def instruction_profile(m: FxpModel, input_count: int = 1,
                        cfg: AccumulatorConfig | None = None) -> InstructionProfile:
    """Topology-derived op counts under the documented cycle weights.

    The relative execution time compares against a float reference that
    issues one MAC per cycle and pays none of the integer bookkeeping.
    """
    cfg = cfg or AccumulatorConfig()
    if input_count < 1:
        raise InvalidInput("input_count must be >= 1")
    spec = m.spec
    counts = spec.activation_counts()
    mac_ops = spec.macs_total() * input_count
    flush_ops = 0
    if cfg.flush_cadence is not None:
        for blk, n_act in zip(spec.blocks, counts):
            flush_ops += math.ceil(blk.macs_per_activation / cfg.flush_cadence) * n_act
        flush_ops *= input_count
    act_elements = sum(n for blk, n in zip(spec.blocks, counts) if blk.activate)
    rescale_ops = act_elements * input_count
    normalization_ops = act_elements * input_count if m.mode == MODE_PTQ else 0
    load_store_ops = (2 * mac_ops + rescale_ops)
    degree = simd_degree(m.operand_bits, cfg.acc_bits)
    cycles = (mac_ops / degree
              + CYCLE_WEIGHTS["flush"] * flush_ops
              + CYCLE_WEIGHTS["normalization"] * normalization_ops
              + CYCLE_WEIGHTS["rescale"] * rescale_ops
              + CYCLE_WEIGHTS["load_store"] * load_store_ops)
    flp_cycles = float(mac_ops)
    return InstructionProfile(
        mac_ops=mac_ops, flush_ops=flush_ops, normalization_ops=normalization_ops,
        rescale_ops=rescale_ops, load_store_ops=load_store_ops, degree=degree,
        cycles=cycles, relative_exec_time=cycles / flp_cycles)


# ---------------------------------------------------------------------------
# FXPM container
# ---------------------------------------------------------------------------


def _weight_dtype(bits: int):
    return np.int8 if bits <= 8 else np.int16


def save_fxp_model(m: FxpModel, path) -> None:
    """Write the integer model as an FXPM container."""
    header = {
        "schema": "fxpkws/fxpmodel/v1",
        "spec": _spec_to_json(m.spec),
        "mode": m.mode,
        "b_w": m.b_w, "b_a": m.b_a, "b_in": m.b_in, "q_in": m.q_in, "c_a": m.c_a,
        "layers": [
            {"q_w": layer.weights.q, "q_x_in": layer.q_x_in, "q_out": layer.q_out,
             "activate": layer.activate, "stride": list(layer.stride)}
            for layer in m.layers
        ],
        "stats": None if m.stats is None else {
            "mean": m.stats.mean.tolist(), "std": m.stats.std.tolist(),
            "max_abs": m.stats.max_abs},
    }
    tensors = {}
    wdtype = _weight_dtype(m.b_w)
    for i, layer in enumerate(m.layers):
        tensors[f"layer{i}.weights"] = layer.weights.array.astype(wdtype)
        tensors[f"layer{i}.bias"] = layer.bias.array.astype(np.int32)
    container.write_container(path, FXPM_MAGIC, FXPM_VERSION, header, tensors)


def load_fxp_model(path) -> FxpModel:
    header, _, tensors = container.read_container(path, FXPM_MAGIC, FXPM_VERSION)
    if header.get("schema") != "fxpkws/fxpmodel/v1":
        raise LayoutError(f"{path}: unexpected schema {header.get('schema')!r}")
    spec = _spec_from_json(header["spec"])
    layers = []
    for i, meta in enumerate(header["layers"]):
        w = tensors[f"layer{i}.weights"].astype(np.int64)
        b = tensors[f"layer{i}.bias"].astype(np.int64)
        q_acc = meta["q_w"] + meta["q_x_in"]
        layers.append(LayerFxp(
            weights=FxpTensor(codes=w, shape=w.shape, bits=header["b_w"], q=meta["q_w"]),
            bias=FxpTensor(codes=b, shape=b.shape, bits=BIAS_BITS, q=q_acc),
            stride=tuple(meta["stride"]),
            activate=bool(meta["activate"]),
            q_x_in=meta["q_x_in"],
            q_out=meta["q_out"],
        ))
    stats = None
    if header.get("stats") is not None:
        s = header["stats"]
        stats = StandardizationStats(mean=np.array(s["mean"]), std=np.array(s["std"]),
                                     max_abs=float(s["max_abs"]))
    return FxpModel(spec=spec, layers=layers, mode=header["mode"], b_w=header["b_w"],
                    b_a=header["b_a"], b_in=header["b_in"], q_in=header["q_in"],
                    c_a=header["c_a"], stats=stats)


def report_to_json_str(reports: dict) -> str:
    """Multi-cadence report bundle as a JSON string (stable key order)."""
    doc = {"cadences": [c if c is not None else "none" for c in reports],
           "reports": [reports[c].to_json() for c in reports]}
    return json.dumps(doc, indent=2, sort_keys=True)
