"""Five-block fully convolutional keyword-spotting model.

All convolutions are VALID (no padding) with per-block strides; the
default geometry collapses a (76, 64, 1) feature window to (1, 1)
spatial by block 3, the last two blocks are 1x1, and the final block is
the classifier (no batch norm, no activation) feeding a softmax.

Three forward modes:

* plain float (fq disabled): raw weights, batch norm, plain ReLU.
* fake-quant, batch-norm stats live: weights pass tanh then unit-grid
  fake quantization, batch norm runs on batch statistics, activations
  pass the clipped-ReLU grid quantizer.
* fake-quant, stats frozen (``bn_frozen``): batch norm is folded into
  the effective weights *inside the forward pass* (w_fold =
  tanh(raw) * gamma/sqrt(var+eps), clipped to [-1, 1], fake-quantized;
  bias folded and fake-quantized at the accumulator q-format), so the
  trained forward is literally the integer engine's arithmetic and
  export is lossless by construction.

Everything runs in float64. In the frozen mode every tensor in the
forward pass is a dyadic rational with a small integer numerator, so
BLAS summation order cannot perturb results and the pass is bit-exactly
reproducible by integer arithmetic.

Backward passes are manual numpy; quantizer nodes use straight-through
gradients, tanh contributes 1 - tanh^2, and the activation quantizer's
clip contributes its pass mask.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from .errors import InvalidBN, InvalidInput, LayoutError, ShapeError
from .quantizers import (
    FakeQuantConfig,
    activation_pass_mask,
    activation_values,
    fake_quant_feature,
    fake_quant_unit,
    squash,
    squash_grad,
)

CHECKPOINT_MAGIC = b"KWSM"
CHECKPOINT_VERSION = 1

# Width (bits) at which folded biases are fake-quantized / exported.
BIAS_BITS = 32

INPUT_SHAPE = (76, 64, 1)


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """One convolutional block: kernel (kh, kw), channels, stride.

    ``has_bn``/``activate`` are both False exactly for the classifier.
    MACs per output activation = kh * kw * in_ch.
    """

    kernel: tuple[int, int]
    in_ch: int
    out_ch: int
    stride: tuple[int, int] = (1, 1)
    has_bn: bool = True
    activate: bool = True

    def __post_init__(self):
        kh, kw = self.kernel
        sh, sw = self.stride
        if min(kh, kw, sh, sw, self.in_ch, self.out_ch) < 1:
            raise InvalidInput(f"all conv dimensions must be >= 1: {self}")

    @property
    def macs_per_activation(self) -> int:
        return self.kernel[0] * self.kernel[1] * self.in_ch

    @property
    def param_count(self) -> int:
        n = self.kernel[0] * self.kernel[1] * self.in_ch * self.out_ch + self.out_ch
        if self.has_bn:
            n += 2 * self.out_ch  # gamma, beta
        return n

    def out_hw(self, in_hw: tuple[int, int]) -> tuple[int, int]:
        (kh, kw), (sh, sw) = self.kernel, self.stride
        oh = (in_hw[0] - kh) // sh + 1
        ow = (in_hw[1] - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {self.kernel} does not fit input {in_hw}")
        return oh, ow


@dataclass(frozen=True)
class ModelSpec:
    """Block stack over a (76, 64, 1) input; the last block is the classifier."""

    blocks: tuple[ConvSpec, ...]
    num_classes: int
    input_shape: tuple[int, int, int] = INPUT_SHAPE

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.num_classes < 2:
            raise InvalidInput("need at least 2 classes")
        if self.input_shape[2] != self.blocks[0].in_ch:
            raise ShapeError("first block in_ch must match input channels")
        for a, b in zip(self.blocks, self.blocks[1:]):
            if a.out_ch != b.in_ch:
                raise ShapeError(f"channel mismatch {a.out_ch} -> {b.in_ch}")
        last = self.blocks[-1]
        if last.out_ch != self.num_classes:
            raise ShapeError("classifier out_ch must equal num_classes")
        if last.has_bn or last.activate:
            raise InvalidInput("classifier block must have no BN and no activation")
        if self.hidden_shapes()[-1][:2] != (1, 1):
            raise ShapeError("geometry must collapse to 1x1 spatial before softmax")

    def hidden_shapes(self) -> list[tuple[int, int, int]]:
        """Output (h, w, c) of each block."""
        hw = self.input_shape[:2]
        out = []
        for blk in self.blocks:
            hw = blk.out_hw(hw)
            out.append((hw[0], hw[1], blk.out_ch))
        return out

    def activation_counts(self) -> list[int]:
        return [h * w * c for (h, w, c) in self.hidden_shapes()]

    def macs_total(self) -> int:
        return sum(n * blk.macs_per_activation
                   for n, blk in zip(self.activation_counts(), self.blocks))

    def param_count(self) -> int:
        return sum(blk.param_count for blk in self.blocks)


def _chain(kernels, strides, channels, num_classes, with_bn=True):
    blocks = []
    chans = list(channels) + [num_classes]
    for i, (k, s) in enumerate(zip(kernels, strides)):
        last = i == len(kernels) - 1
        blocks.append(ConvSpec(
            kernel=k, in_ch=chans[i], out_ch=chans[i + 1], stride=s,
            has_bn=with_bn and not last, activate=not last))
    return ModelSpec(blocks=tuple(blocks), num_classes=num_classes)


_KERNELS = ((3, 4), (4, 4), (7, 4), (1, 1), (1, 1))
_STRIDES = ((3, 4), (3, 2), (2, 4), (1, 1), (1, 1))


def default_spec(num_classes: int = 35) -> ModelSpec:
    """Full-size geometry: channels 1->32->40->128->160->classes.

    Spatial plan over (76, 64): (25,16) -> (8,7) -> (1,1) -> (1,1) -> (1,1),
    giving per-block MACs/activation (12, 512, 1120, 128, 160) and
    activation counts (12800, 2240, 128, 160, num_classes).
    191,419 parameters at 35 classes.
    """
    return _chain(_KERNELS, _STRIDES, (1, 32, 40, 128, 160), num_classes)


def desk_spec(num_classes: int = 4) -> ModelSpec:
    """Downsized geometry for CI-scale training: channels 1->8->12->24->32."""
    return _chain(_KERNELS, _STRIDES, (1, 8, 12, 24, 32), num_classes)


def profile_spec(num_classes: int = 4, widths=(1, 16, 24, 48, 64)) -> ModelSpec:
    """Saturation-profiling variant: same geometry, no batch norm.

    Without BN the MAC chains accumulate unnormalized pre-activations,
    which is the regime where a 16-bit accumulator actually saturates;
    with BN folded, pre-activations are O(1) by construction and a
    six-bit model never stresses the accumulator.
    """
    return _chain(_KERNELS, _STRIDES, widths, num_classes, with_bn=False)


def tiny_spec(num_classes: int = 3, widths=(1, 4, 4, 6, 8)) -> ModelSpec:
    """Two-spatial-block toy for gradient checks (fast finite differences)."""
    return _chain(_KERNELS, _STRIDES, widths, num_classes)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class BatchNormParams:
    """Per-channel batch norm parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.eps <= 0:
            raise InvalidBN("eps must be positive")
        if np.any(self.running_var < 0):
            raise InvalidBN("running variance must be non-negative")
        shapes = {getattr(self, n).shape for n in ("gamma", "beta", "running_mean", "running_var")}
        if len(shapes) != 1:
            raise InvalidBN("BN parameter shapes differ")

    @classmethod
    def identity(cls, channels: int) -> "BatchNormParams":
        return cls(gamma=np.ones(channels), beta=np.zeros(channels),
                   running_mean=np.zeros(channels), running_var=np.ones(channels))


@dataclass
class BlockParams:
    """Trainable tensors of one block: latent weights (kh,kw,in,out), bias, BN."""

    raw_w: np.ndarray
    bias: np.ndarray
    bn: BatchNormParams | None = None


@dataclass
class StandardizationStats:
    """Per-feature-bin standardization frozen from the training split."""

    mean: np.ndarray
    std: np.ndarray
    max_abs: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise InvalidInput("standardization std must be positive (floor upstream)")
        if not self.max_abs > 0:
            raise InvalidInput("max_abs must be positive")

    def apply(self, windows: np.ndarray) -> np.ndarray:
        return (np.asarray(windows, dtype=np.float64) - self.mean) / self.std


@dataclass
class TrainedModel:
    """Model spec + parameters + input statistics + quantization config.

    ``bn_frozen`` selects the fold-aware forward; models without any BN
    are frozen from the start (their training forward already is the
    inference arithmetic).
    """

    spec: ModelSpec
    params: list[BlockParams]
    fq: FakeQuantConfig
    stats: StandardizationStats | None = None
    bn_frozen: bool = False

    def __post_init__(self):
        if len(self.params) != len(self.spec.blocks):
            raise ShapeError("one BlockParams per block required")
        if not any(blk.has_bn for blk in self.spec.blocks):
            self.bn_frozen = True

    def acc_qformat(self, block_idx: int) -> int:
        """Fractional bits carried by block ``block_idx``'s MAC products.

        Block 0 consumes features at q_in; later blocks consume
        activations at q_a. Weights always carry b_w - 1.
        """
        fq = self.fq
        if block_idx == 0:
            if fq.q_in is None:
                raise InvalidInput("q_in unset; standardization stats must be attached first")
            q_x = fq.q_in
        else:
            q_x = fq.q_a
        return (fq.b_w - 1) + q_x


def init_model(spec: ModelSpec, fq: FakeQuantConfig, seed: int,
               stats: StandardizationStats | None = None) -> TrainedModel:
    """Seeded parameter init: latent weights at 1/sqrt(fan-in) scale."""
    rng = np.random.default_rng(seed)
    params = []
    for blk in spec.blocks:
        fan_in = blk.macs_per_activation
        raw = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(*blk.kernel, blk.in_ch, blk.out_ch))
        bn = BatchNormParams.identity(blk.out_ch) if blk.has_bn else None
        params.append(BlockParams(raw_w=raw, bias=np.zeros(blk.out_ch), bn=bn))
    return TrainedModel(spec=spec, params=params, fq=fq, stats=stats)


# ---------------------------------------------------------------------------
# Conv primitive (im2col over VALID windows, receptive field in
# (kh, kw, in_ch) row-major order)
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kernel, stride) -> np.ndarray:
    """(B, H, W, C) -> (B, OH, OW, kh*kw*C) patch matrix."""
    kh, kw = kernel
    sh, sw = stride
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # (B, H', W', C, kh, kw)
    win = win[:, ::sh, ::sw]
    win = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))  # (B, OH, OW, kh, kw, C)
    b, oh, ow = win.shape[:3]
    return win.reshape(b, oh, ow, kh * kw * x.shape[3])


def conv_forward(x: np.ndarray, w: np.ndarray, stride) -> np.ndarray:
    """VALID convolution; w has layout (kh, kw, in_ch, out_ch)."""
    kh, kw, cin, cout = w.shape
    cols = _im2col(x, (kh, kw), stride)
    return cols @ w.reshape(kh * kw * cin, cout)


def conv_backward(x: np.ndarray, w: np.ndarray, stride, d_out: np.ndarray):
    """Gradients (d_x, d_w) of conv_forward."""
    kh, kw, cin, cout = w.shape
    sh, sw = stride
    cols = _im2col(x, (kh, kw), stride)
    b, oh, ow, _ = cols.shape
    d_flat = d_out.reshape(b * oh * ow, cout)
    d_w = (cols.reshape(b * oh * ow, -1).T @ d_flat).reshape(w.shape)
    d_cols = (d_flat @ w.reshape(-1, cout).T).reshape(b, oh, ow, kh, kw, cin)
    d_x = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            d_x[:, i:i + oh * sh:sh, j:j + ow * sw:sw, :] += d_cols[:, :, :, i, j, :]
    return d_x, d_w


# ---------------------------------------------------------------------------
# Batch norm
# ---------------------------------------------------------------------------

BN_UPDATE = 0.1  # running-stat EMA update rate during live-stats training


def batchnorm_forward(z: np.ndarray, bn: BatchNormParams, train_mode: bool,
                      update_running: bool = False):
    """Channel-wise BN over (B, H, W); returns (out, cache-for-backward)."""
    if train_mode:
        mean = z.mean(axis=(0, 1, 2))
        var = z.var(axis=(0, 1, 2))
        if update_running:
            bn.running_mean = (1 - BN_UPDATE) * bn.running_mean + BN_UPDATE * mean
            bn.running_var = (1 - BN_UPDATE) * bn.running_var + BN_UPDATE * var
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (z - mean) * inv_std
    out = bn.gamma * xhat + bn.beta
    return out, (xhat, inv_std, bn.gamma, z.shape)


def batchnorm_backward(d_out: np.ndarray, cache):
    """Standard batch-stat BN backward; returns (d_z, d_gamma, d_beta)."""
    xhat, inv_std, gamma, _shape = cache
    d_gamma = np.sum(d_out * xhat, axis=(0, 1, 2))
    d_beta = np.sum(d_out, axis=(0, 1, 2))
    d_xhat = d_out * gamma
    d_z = inv_std * (d_xhat
                     - d_xhat.mean(axis=(0, 1, 2))
                     - xhat * (d_xhat * xhat).mean(axis=(0, 1, 2)))
    return d_z, d_gamma, d_beta


def fold_batchnorm(w: np.ndarray, bias: np.ndarray, bn: BatchNormParams):
    """Absorb BN into conv: w' = w * g/s per out channel, b' = (b - mu) * g/s + beta."""
    denom = bn.running_var + bn.eps
    if np.any(denom <= 0):
        raise InvalidBN("running_var + eps must be positive to fold")
    scale = bn.gamma / np.sqrt(denom)
    return w * scale, (bias - bn.running_mean) * scale + bn.beta


# ---------------------------------------------------------------------------
# Effective (inference-semantics) parameters for the frozen-stats mode
# ---------------------------------------------------------------------------


def bias_quant_scale(model: TrainedModel, block_idx: int) -> float:
    return 2.0 ** model.acc_qformat(block_idx)


def effective_block_params(model: TrainedModel, block_idx: int):
    """Fold-aware effective parameters of one block.

    Returns ``(w_fold_pre, w_q, bias_q)`` where ``w_fold_pre`` is the
    folded weight *before* the [-1, 1] clip (the backward pass needs it
    for the clip mask) and ``w_q``/``bias_q`` are the fake-quantized
    values the forward actually multiplies and adds. Export and the
    frozen-mode forward both call this, which is what makes export
    zero-error: they cannot diverge.
    """
    bp = model.params[block_idx]
    w_hat = squash(bp.raw_w)
    if bp.bn is not None:
        w_fold_pre, bias_fold = fold_batchnorm(w_hat, bp.bias, bp.bn)
    else:
        w_fold_pre, bias_fold = w_hat, bp.bias
    w_q = fake_quant_unit(np.clip(w_fold_pre, -1.0, 1.0), model.fq.b_w)
    q_acc = model.acc_qformat(block_idx)
    bias_q = fake_quant_feature(bias_fold, BIAS_BITS, q_acc)
    return w_fold_pre, w_q, bias_q


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _check_features(model: TrainedModel, feats: np.ndarray) -> np.ndarray:
    """Accept (h, w), (batch, h, w) for 1-channel input, or (batch, h, w, c)."""
    feats = np.asarray(feats, dtype=np.float64)
    h, w, c = model.spec.input_shape
    if feats.ndim == 2 and c == 1:
        feats = feats[None]
    if feats.ndim == 3 and c == 1:
        feats = feats[..., None]
    if feats.ndim != 4 or feats.shape[1:] != (h, w, c):
        raise ShapeError(f"expected (batch, {h}, {w}, {c}) features, got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise InvalidInput("features must be finite")
    return feats


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: TrainedModel, feats: np.ndarray, train_mode: bool = False,
            return_cache: bool = False, update_running: bool | None = None):
    """Standardized feature windows (B, 76, 64) -> class posteriors (B, C).

    ``train_mode`` switches BN to batch statistics (live-stats mode only)
    and records intermediate tensors for :func:`backward` when
    ``return_cache`` is set. ``update_running`` controls the EMA update
    of running BN statistics and defaults to ``train_mode``; gradient
    checks pass False to keep the model state untouched.
    """
    if update_running is None:
        update_running = train_mode
    x = _check_features(model, feats)
    fq = model.fq
    cache = {"x_in": x, "blocks": []}
    if fq.enabled:
        if fq.q_in is None:
            raise InvalidInput("q_in unset; attach standardization stats before fq forward")
        x = fake_quant_feature(x, fq.b_in, fq.q_in)
    frozen = model.bn_frozen
    for i, (blk, bp) in enumerate(zip(model.spec.blocks, model.params)):
        bcache = {"x": x}
        if not fq.enabled:
            z = conv_forward(x, bp.raw_w, blk.stride) + bp.bias
            bcache["pre_bn"] = z
            if bp.bn is not None:
                z, bn_cache = batchnorm_forward(z, bp.bn, train_mode, update_running=train_mode and update_running)
                bcache["bn"] = bn_cache
            bcache["pre_act"] = z
            x = np.maximum(z, 0.0) if blk.activate else z
        elif not frozen:
            w_hat = squash(bp.raw_w)
            w_q = fake_quant_unit(w_hat, fq.b_w)
            bcache["w_hat"] = w_hat
            z = conv_forward(x, w_q, blk.stride) + bp.bias
            bcache["pre_bn"] = z
            if bp.bn is not None:
                z, bn_cache = batchnorm_forward(z, bp.bn, train_mode, update_running=train_mode and update_running)
                bcache["bn"] = bn_cache
            bcache["pre_act"] = z
            if blk.activate:
                x = activation_values(z, fq.b_a, fq.q_a, fq.c_a)
            else:
                x = z
        else:
            w_fold_pre, w_q, bias_q = effective_block_params(model, i)
            bcache["w_fold_pre"] = w_fold_pre
            bcache["w_q"] = w_q
            z = conv_forward(x, w_q, blk.stride) + bias_q
            bcache["pre_act"] = z
            if blk.activate:
                x = activation_values(z, fq.b_a, fq.q_a, fq.c_a)
            else:
                x = z
        cache["blocks"].append(bcache)
        bcache["out"] = x
    logits = x.reshape(x.shape[0], model.spec.num_classes)
    probs = softmax(logits)
    cache["logits"] = logits
    if return_cache:
        return probs, cache
    return probs


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def backward(model: TrainedModel, cache: dict, probs: np.ndarray, labels: np.ndarray):
    """Mean-CE gradients for every trainable tensor.

    Returns a list (per block) of dicts with keys among
    {"raw_w", "bias", "gamma", "beta"}. Quantizers are straight-through;
    the clipped activation passes gradient only on (0, c_a); the frozen
    mode folds BN gradients through the effective-weight product.
    """
    fq = model.fq
    batch = probs.shape[0]
    onehot = np.zeros_like(probs)
    onehot[np.arange(batch), labels] = 1.0
    d_logits = (probs - onehot) / batch
    spec = model.spec
    d_x = d_logits.reshape(batch, 1, 1, spec.num_classes)
    grads: list[dict] = [None] * len(spec.blocks)
    frozen = model.bn_frozen
    for i in range(len(spec.blocks) - 1, -1, -1):
        blk, bp, bcache = spec.blocks[i], model.params[i], cache["blocks"][i]
        g: dict[str, np.ndarray] = {}
        if blk.activate:
            if fq.enabled:
                d_z = d_x * activation_pass_mask(bcache["pre_act"], fq.c_a)
            else:
                d_z = d_x * (bcache["pre_act"] > 0.0)
        else:
            d_z = d_x
        if not fq.enabled:
            if bp.bn is not None:
                d_z, g["gamma"], g["beta"] = batchnorm_backward(d_z, bcache["bn"])
            g["bias"] = d_z.sum(axis=(0, 1, 2))
            d_x, g["raw_w"] = conv_backward(bcache["x"], bp.raw_w, blk.stride, d_z)
        elif not frozen:
            if bp.bn is not None:
                d_z, g["gamma"], g["beta"] = batchnorm_backward(d_z, bcache["bn"])
            g["bias"] = d_z.sum(axis=(0, 1, 2))
            w_q = fake_quant_unit(bcache["w_hat"], fq.b_w)
            d_x, d_wq = conv_backward(bcache["x"], w_q, blk.stride, d_z)
            # STE through the unit-grid quantizer, then tanh'.
            g["raw_w"] = d_wq * squash_grad(bp.raw_w)
        else:
            d_bias_q = d_z.sum(axis=(0, 1, 2))  # STE through bias fake-quant
            d_x, d_wq = conv_backward(bcache["x"], bcache["w_q"], blk.stride, d_z)
            d_wfold = d_wq * (np.abs(bcache["w_fold_pre"]) <= 1.0)  # clip mask
            t = squash(bp.raw_w)
            if bp.bn is not None:
                bn = bp.bn
                inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
                scale = bn.gamma * inv_std
                g["raw_w"] = d_wfold * scale * (1.0 - t * t)
                g["gamma"] = (np.sum(d_wfold * t, axis=(0, 1, 2))
                              + d_bias_q * (bp.bias - bn.running_mean)) * inv_std
                g["beta"] = d_bias_q
                g["bias"] = d_bias_q * scale
            else:
                g["raw_w"] = d_wfold * (1.0 - t * t)
                g["bias"] = d_bias_q
        grads[i] = g
    return grads


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def _spec_to_json(spec: ModelSpec) -> dict:
    return {
        "blocks": [
            {"kernel": list(b.kernel), "in_ch": b.in_ch, "out_ch": b.out_ch,
             "stride": list(b.stride), "has_bn": b.has_bn, "activate": b.activate}
            for b in spec.blocks
        ],
        "num_classes": spec.num_classes,
        "input_shape": list(spec.input_shape),
    }


def _spec_from_json(doc: dict) -> ModelSpec:
    blocks = tuple(
        ConvSpec(kernel=tuple(b["kernel"]), in_ch=b["in_ch"], out_ch=b["out_ch"],
                 stride=tuple(b["stride"]), has_bn=b["has_bn"], activate=b["activate"])
        for b in doc["blocks"]
    )
    return ModelSpec(blocks=blocks, num_classes=doc["num_classes"],
                     input_shape=tuple(doc["input_shape"]))


def _fq_to_json(fq: FakeQuantConfig) -> dict:
    return {"b_w": fq.b_w, "b_a": fq.b_a, "b_in": fq.b_in, "q_in": fq.q_in,
            "method": fq.method, "lambda_reg": fq.lambda_reg, "c_a": fq.c_a,
            "enabled": fq.enabled}


def save_checkpoint(model: TrainedModel, path) -> None:
    """Write the model as a KWSM container (float32 little-endian blobs)."""
    header = {
        "schema": "fxpkws/checkpoint/v1",
        "spec": _spec_to_json(model.spec),
        "fq": _fq_to_json(model.fq),
        "bn_frozen": bool(model.bn_frozen),
        "stats": None if model.stats is None else {
            "mean": model.stats.mean.tolist(),
            "std": model.stats.std.tolist(),
            "max_abs": model.stats.max_abs,
        },
    }
    tensors: dict[str, np.ndarray] = {}
    for i, bp in enumerate(model.params):
        tensors[f"block{i}.raw_w"] = bp.raw_w.astype(np.float32)
        tensors[f"block{i}.bias"] = bp.bias.astype(np.float32)
        if bp.bn is not None:
            tensors[f"block{i}.gamma"] = bp.bn.gamma.astype(np.float32)
            tensors[f"block{i}.beta"] = bp.bn.beta.astype(np.float32)
            tensors[f"block{i}.running_mean"] = bp.bn.running_mean.astype(np.float32)
            tensors[f"block{i}.running_var"] = bp.bn.running_var.astype(np.float32)
            header.setdefault("bn_eps", {})[str(i)] = bp.bn.eps
    container.write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, tensors)


def load_checkpoint(path) -> TrainedModel:
    header, _, tensors = container.read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    if header.get("schema") != "fxpkws/checkpoint/v1":
        raise LayoutError(f"{path}: unexpected schema {header.get('schema')!r}")
    spec = _spec_from_json(header["spec"])
    fq = FakeQuantConfig(**header["fq"])
    params = []
    for i, blk in enumerate(spec.blocks):
        raw = tensors[f"block{i}.raw_w"].astype(np.float64)
        bias = tensors[f"block{i}.bias"].astype(np.float64)
        bn = None
        if blk.has_bn:
            bn = BatchNormParams(
                gamma=tensors[f"block{i}.gamma"].astype(np.float64),
                beta=tensors[f"block{i}.beta"].astype(np.float64),
                running_mean=tensors[f"block{i}.running_mean"].astype(np.float64),
                running_var=tensors[f"block{i}.running_var"].astype(np.float64),
                eps=header.get("bn_eps", {}).get(str(i), 1e-5),
            )
        params.append(BlockParams(raw_w=raw, bias=bias, bn=bn))
    stats = None
    if header.get("stats") is not None:
        s = header["stats"]
        stats = StandardizationStats(mean=np.array(s["mean"]), std=np.array(s["std"]),
                                     max_abs=float(s["max_abs"]))
    return TrainedModel(spec=spec, params=params, fq=fq, stats=stats,
                        bn_frozen=bool(header.get("bn_frozen", False)))


def clone_model(model: TrainedModel) -> TrainedModel:
    """Deep copy of parameters (spec and fq are immutable enough to share)."""
    params = []
    for bp in model.params:
        bn = None
        if bp.bn is not None:
            bn = BatchNormParams(gamma=bp.bn.gamma.copy(), beta=bp.bn.beta.copy(),
                                 running_mean=bp.bn.running_mean.copy(),
                                 running_var=bp.bn.running_var.copy(), eps=bp.bn.eps)
        params.append(BlockParams(raw_w=bp.raw_w.copy(), bias=bp.bias.copy(), bn=bn))
    return TrainedModel(spec=model.spec, params=params, fq=replace(model.fq),
                        stats=model.stats, bn_frozen=model.bn_frozen)
