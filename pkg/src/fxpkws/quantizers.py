"""Training-side fake quantization.

Weights train as latent reals and reach the forward pass through
tanh (keeping the effective weight in (-1, 1)) followed by
quantize-then-dequantize on the unit-range grid, so training sees
exactly the values integer inference will use. Two regularizers
cooperate with that grid:

* ``sqwd``: penalizes latent weights beyond |raw| > 2 where tanh
  flattens and gradients die; the effective-weight distribution stays
  spread across (-1, 1) instead of piling on the asymptotes.
* ``acr``: a rectified cosine of the effective weight whose zeros sit
  exactly on the representable codes, pulling weights onto the grid.

Activations pass through a clipped-ReLU quantizer on [0, c_a] and
features through the q-format quantizer. All quantizers are
quantize-then-dequantize in float (outputs lie exactly on their
integer grids); backward passes treat the rounding step as identity
(straight-through) while analytic factors (tanh', clip masks) are
provided here for the trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .fxp import (
    check_bits,
    check_qformat,
    dequantize_qformat,
    dequantize_unit,
    quantize_qformat,
    quantize_unit,
    round_half_away,
)

# Latent-weight bound for the sqwd penalty; tanh(2) ~ 0.964, past which
# the reparametrization is effectively flat.
SQWD_LATENT_BOUND = 2.0

METHODS = ("sqwd", "acr", "none")

# Constant per-method regularizer weights (no annealing).
DEFAULT_LAMBDA = {"acr": 1e-3, "sqwd": 1e-4, "none": 0.0}


@dataclass
class FakeQuantConfig:
    """Bit widths and method selection for simulated quantization.

    ``q_in`` (feature fractional bits) is data-dependent and stays None
    until standardization statistics exist. ``c_a`` must be a power of
    two so the activation grid step is a pure shift in the integer
    engine. ``lambda_reg=None`` resolves to the per-method default.
    """

    b_w: int = 8
    b_a: int = 8
    b_in: int = 8
    q_in: int | None = None
    method: str = "none"
    lambda_reg: float | None = None
    c_a: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        check_bits(self.b_w)
        check_bits(self.b_a)
        check_bits(self.b_in)
        if self.q_in is not None:
            check_qformat(self.q_in)
        self.method = str(self.method).lower()
        if self.method not in METHODS:
            raise InvalidInput(f"method {self.method!r} not one of {METHODS}")
        if self.lambda_reg is None:
            self.lambda_reg = DEFAULT_LAMBDA[self.method]
        if self.lambda_reg < 0:
            raise InvalidInput("lambda_reg must be non-negative")
        if not (self.c_a > 0 and math.isfinite(self.c_a)):
            raise InvalidInput("c_a must be positive and finite")
        if 2.0 ** round(math.log2(self.c_a)) != self.c_a:
            raise InvalidInput(
                f"c_a must be a power of two for shift-only integer rescaling, got {self.c_a}")

    @property
    def q_a(self) -> int:
        """Fractional bits of activation codes: b_a - 1 - log2(c_a)."""
        return self.b_a - 1 - int(round(math.log2(self.c_a)))


def squash(raw):
    """Map latent weights into (-1, 1): tanh."""
    return np.tanh(raw)


def squash_grad(raw):
    """d tanh / d raw = 1 - tanh^2."""
    t = np.tanh(raw)
    return 1.0 - t * t


def fake_quant_unit(w_hat, bits: int):
    """Quantize-then-dequantize on the 2^bits-point unit-range grid."""
    return dequantize_unit(quantize_unit(w_hat, bits), bits)


def ste_backward(upstream_grad):
    """Straight-through estimator: the rounding node is identity in backward."""
    return upstream_grad


def sqwd_reg_loss(raw_weights, lam: float) -> float:
    """lam * mean(max(0, |raw| - 2)^2): zero while latents stay in the
    region where tanh still has gradient."""
    if lam < 0:
        raise InvalidInput("lambda must be non-negative")
    if lam == 0.0:
        return 0.0
    raw = np.asarray(raw_weights, dtype=np.float64)
    excess = np.maximum(0.0, np.abs(raw) - SQWD_LATENT_BOUND)
    return float(lam * np.mean(excess**2))


def sqwd_reg_grad(raw_weights, lam: float):
    """Analytic gradient of sqwd_reg_loss w.r.t. the latent weights."""
    raw = np.asarray(raw_weights, dtype=np.float64)
    if lam == 0.0:
        return np.zeros_like(raw)
    excess = np.maximum(0.0, np.abs(raw) - SQWD_LATENT_BOUND)
    return lam * 2.0 * excess * np.sign(raw) / raw.size


def acr_reg_loss(w_hat, bits: int, lam: float) -> float:
    """lam * mean(|sin(pi * 2^(bits-1) * (w + 1))|).

    The argument hits integer multiples of pi exactly at the unit-grid
    codes, so the penalty is zero iff every weight is representable.
    """
    check_bits(bits)
    if lam < 0:
        raise InvalidInput("lambda must be non-negative")
    if lam == 0.0:
        return 0.0
    w = np.asarray(w_hat, dtype=np.float64)
    half = 2.0 ** (bits - 1)
    return float(lam * np.mean(np.abs(np.sin(np.pi * half * (w + 1.0)))))


def acr_reg_grad(w_hat, bits: int, lam: float):
    """Analytic gradient of acr_reg_loss w.r.t. the effective weights."""
    w = np.asarray(w_hat, dtype=np.float64)
    if lam == 0.0:
        return np.zeros_like(w)
    half = 2.0 ** (bits - 1)
    phase = np.pi * half * (w + 1.0)
    return lam * np.sign(np.sin(phase)) * np.cos(phase) * np.pi * half / w.size


def fake_quant_activation(x, bits: int, c_a: float):
    """2^bits-level uniform quantizer on [0, c_a] (clipped-ReLU included).

    Composition: scale [0, c_a] to [-1, 1], unit-grid quantize, scale
    back. Output is within [0, c_a] and monotone non-decreasing in x.
    """
    check_bits(bits)
    if not (c_a > 0 and math.isfinite(c_a)):
        raise InvalidInput("c_a must be positive and finite")
    x = np.asarray(x, dtype=np.float64)
    s = 2.0 * np.clip(x, 0.0, c_a) / c_a - 1.0
    return c_a * (fake_quant_unit(s, bits) + 1.0) / 2.0


def activation_pass_mask(x, c_a: float):
    """1 where the clipped-ReLU passes gradient (0 < x < c_a), else 0."""
    x = np.asarray(x)
    return ((x > 0.0) & (x < c_a)).astype(np.float64)


def fake_quant_feature(f, bits: int, q: int):
    """Quantize-then-dequantize on the signed (bits, q) q-format grid."""
    return dequantize_qformat(quantize_qformat(f, bits, q), q)


def activation_codes(x, bits_a: int, q_a: int, c_a: float):
    """Integer activation codes as the engine stores them.

    Equivalent to fake_quant_activation(x, bits_a - 1, c_a) * 2^q_a: the
    stored code is signed bits_a-bit with the sign bit unused (ReLU
    output is non-negative), so the value grid has 2^(bits_a-1) levels.
    This direct form is float-exact (x * 2^q_a never rounds), which the
    scale/unscale composition cannot guarantee near rounding ties; model
    and engine therefore both evaluate this form.
    """
    x = np.asarray(x, dtype=np.float64)
    u = round_half_away(np.clip(x, 0.0, c_a) * 2.0**q_a)
    return np.clip(u, 0, 2 ** (bits_a - 1) - 1).astype(np.int64)


def activation_values(x, bits_a: int, q_a: int, c_a: float):
    """Fake-quantized activations on the exact engine grid (codes * 2^-q_a)."""
    return activation_codes(x, bits_a, q_a, c_a).astype(np.float64) * 2.0**-q_a
