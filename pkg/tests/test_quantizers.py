"""Fake-quantization node and regularizer tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fxpkws import InvalidInput, code_bounds, dequantize_unit, quantize_unit
from fxpkws.quantizers import (
    FakeQuantConfig,
    acr_reg_grad,
    acr_reg_loss,
    activation_codes,
    activation_pass_mask,
    activation_values,
    fake_quant_activation,
    fake_quant_feature,
    fake_quant_unit,
    squash,
    squash_grad,
    sqwd_reg_grad,
    sqwd_reg_loss,
    ste_backward,
)


class TestSquash:
    def test_values(self):
        assert float(squash(0.0)) == 0.0
        assert abs(float(squash(0.5)) - 0.46211715726000974) < 1e-15
        assert 0.99999 < float(squash(10.0)) < 1.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(0, 1.5, size=64)
        h = 1e-6
        fd = (np.tanh(raw + h) - np.tanh(raw - h)) / (2 * h)
        rel = np.abs(squash_grad(raw) - fd) / np.maximum(np.abs(fd), 1e-12)
        assert rel.max() < 1e-5


class TestFakeQuantUnit:
    def test_frozen_values(self):
        assert float(fake_quant_unit(0.0, 8)) == 0.0
        assert float(fake_quant_unit(0.3, 4)) == 0.25

    @pytest.mark.parametrize("bits", [2, 4, 8, 12])
    def test_idempotent_and_grid_valued(self, bits):
        rng = np.random.default_rng(1)
        w = rng.uniform(-1, 1, size=2000)
        fq = fake_quant_unit(w, bits)
        assert np.array_equal(fake_quant_unit(fq, bits), fq)
        # Every output is an exact multiple of the grid step.
        steps = fq * 2.0 ** (bits - 1)
        assert np.array_equal(steps, np.round(steps))

    @pytest.mark.parametrize("bits", [2, 6, 8, 16])
    def test_zero_export_error(self, bits):
        rng = np.random.default_rng(2)
        fq = fake_quant_unit(rng.uniform(-1, 1, size=3000), bits)
        codes = quantize_unit(fq, bits)
        assert np.array_equal(dequantize_unit(codes, bits), fq)


class TestSte:
    def test_identity_bit_for_bit(self):
        g = np.array([1.0, -3.7, 0.0, 1e-300, np.pi])
        out = ste_backward(g)
        assert out is g or np.array_equal(out, g)

    def test_scalar(self):
        assert ste_backward(-3.7) == -3.7


class TestSqwdReg:
    def test_frozen_values(self):
        assert sqwd_reg_loss(np.zeros(10), 1.0) == 0.0
        assert sqwd_reg_loss(np.array([3.0]), 1.0) == 1.0
        assert sqwd_reg_loss(np.array([5.0, -4.0]), 1.0) == (9.0 + 4.0) / 2
        assert sqwd_reg_loss(np.array([100.0]), 0.0) == 0.0

    def test_zero_inside_bound(self):
        raw = np.linspace(-2.0, 2.0, 101)
        assert sqwd_reg_loss(raw, 1.0) == 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        # Stay away from the hinge at |raw| = 2 where FD is one-sided.
        raw = np.concatenate([rng.uniform(-1.8, 1.8, 20), rng.uniform(2.2, 4.0, 20), -rng.uniform(2.2, 4.0, 20)])
        lam = 0.7
        g = sqwd_reg_grad(raw, lam)
        h = 1e-6
        for i in range(raw.size):
            up, dn = raw.copy(), raw.copy()
            up[i] += h
            dn[i] -= h
            fd = (sqwd_reg_loss(up, lam) - sqwd_reg_loss(dn, lam)) / (2 * h)
            assert abs(g[i] - fd) <= 1e-5 * max(abs(fd), 1e-6)

    def test_negative_lambda_raises(self):
        with pytest.raises(InvalidInput):
            sqwd_reg_loss(np.zeros(3), -1.0)


class TestAcrReg:
    def test_zero_on_grid_points(self):
        for bits in (2, 4, 8):
            lo, hi = code_bounds(bits)
            grid = dequantize_unit(np.arange(lo, hi + 1), bits)
            assert acr_reg_loss(grid, bits, 1.0) < 1e-12

    def test_peak_at_midpoints(self):
        bits = 8
        step = 2.0 ** -(bits - 1)
        mid = np.array([0.0 + step / 2, -0.5 + step / 2])
        assert abs(acr_reg_loss(mid, bits, 1.0) - 1.0) < 1e-9

    def test_frozen_mixture(self):
        bits = 8
        step = 2.0 ** -(bits - 1)
        w = np.array([0.0, step / 2])
        assert abs(acr_reg_loss(w, bits, 2.0) - 1.0) < 1e-9

    def test_zero_iff_grid(self):
        bits = 6
        rng = np.random.default_rng(4)
        w = fake_quant_unit(rng.uniform(-1, 1, 500), bits)
        assert acr_reg_loss(w, bits, 1.0) < 1e-12
        w_off = w + 2.0**-bits  # half a step off the grid
        w_off = np.clip(w_off, -1, 1)
        assert acr_reg_loss(w_off, bits, 1.0) > 1e-3

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        bits, lam = 6, 0.3
        w = rng.uniform(-0.95, 0.95, size=40)
        g = acr_reg_grad(w, bits, lam)
        h = 1e-8
        for i in range(w.size):
            up, dn = w.copy(), w.copy()
            up[i] += h
            dn[i] -= h
            fd = (acr_reg_loss(up, bits, lam) - acr_reg_loss(dn, bits, lam)) / (2 * h)
            # The sin flips sign at grid points; skip draws that straddle one.
            if np.sign(np.sin(np.pi * 32 * (up[i] + 1))) != np.sign(np.sin(np.pi * 32 * (dn[i] + 1))):
                continue
            assert abs(g[i] - fd) <= 1e-4 * max(abs(fd), 1e-8)

    def test_lambda_zero_is_exact_zero(self):
        rng = np.random.default_rng(6)
        w = rng.uniform(-1, 1, 100)
        assert acr_reg_loss(w, 8, 0.0) == 0.0
        assert np.all(acr_reg_grad(w, 8, 0.0) == 0.0)


class TestFakeQuantActivation:
    def test_frozen_values(self):
        assert float(fake_quant_activation(-5.0, 8, 1.0)) == 0.0
        assert float(fake_quant_activation(1.0, 8, 1.0)) == 255.0 / 256.0
        assert float(fake_quant_activation(0.5, 2, 1.0)) == 0.5

    @pytest.mark.parametrize("c_a", [0.5, 1.0, 2.0, 4.0])
    def test_output_range_and_monotone(self, c_a):
        x = np.linspace(-2 * c_a, 2 * c_a, 4001)
        y = fake_quant_activation(x, 7, c_a)
        assert y.min() >= 0.0 and y.max() <= c_a
        assert np.all(np.diff(y) >= 0)

    def test_bad_clip_raises(self):
        with pytest.raises(InvalidInput):
            fake_quant_activation(0.5, 8, 0.0)

    @pytest.mark.parametrize("b_a,c_a", [(8, 1.0), (6, 1.0), (8, 2.0), (4, 0.5)])
    def test_direct_code_form_matches_composition(self, b_a, c_a):
        # The engine stores signed b_a-bit codes with the sign bit unused,
        # i.e. the value grid of fake_quant_activation at b_a - 1 levels bits.
        q_a = b_a - 1 - int(math.log2(c_a))
        rng = np.random.default_rng(7)
        x = np.concatenate([
            rng.uniform(-c_a, 2 * c_a, 3000),
            np.arange(-8, 24) * (c_a / 16.0),  # exact dyadics incl. ties
        ])
        direct = activation_values(x, b_a, q_a, c_a)
        composed = fake_quant_activation(x, b_a - 1, c_a)
        assert np.array_equal(direct, composed)
        codes = activation_codes(x, b_a, q_a, c_a)
        assert codes.min() >= 0 and codes.max() <= 2 ** (b_a - 1) - 1

    def test_pass_mask(self):
        x = np.array([-1.0, 0.0, 0.3, 1.0, 1.5])
        assert activation_pass_mask(x, 1.0).tolist() == [0.0, 0.0, 1.0, 0.0, 0.0]


class TestFakeQuantFeature:
    def test_frozen_values(self):
        assert float(fake_quant_feature(0.0, 8, 4)) == 0.0
        assert float(fake_quant_feature(-100.0, 8, 4)) == -8.0
        assert float(fake_quant_feature(3.14159, 8, 4)) == 3.125

    @given(
        st.floats(min_value=-50, max_value=50, allow_nan=False),
        st.sampled_from(range(4, 17)),
        st.sampled_from(range(0, 12)),
    )
    @settings(max_examples=200, deadline=None)
    def test_idempotent(self, f, bits, q):
        y = float(fake_quant_feature(f, bits, q))
        assert float(fake_quant_feature(y, bits, q)) == y


class TestFakeQuantConfig:
    def test_defaults(self):
        cfg = FakeQuantConfig()
        assert cfg.b_w == 8 and cfg.b_a == 8 and cfg.b_in == 8
        assert cfg.method == "none" and cfg.lambda_reg == 0.0
        assert cfg.q_a == 7

    def test_method_lambda_defaults(self):
        assert FakeQuantConfig(method="acr").lambda_reg == 1e-3
        assert FakeQuantConfig(method="SQWD").lambda_reg == 1e-4

    def test_q_a_accounts_for_clip(self):
        assert FakeQuantConfig(c_a=4.0).q_a == 5
        assert FakeQuantConfig(c_a=0.5).q_a == 8

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(b_w=1),
            dict(b_a=17),
            dict(method="other"),
            dict(lambda_reg=-0.1),
            dict(c_a=0.3),
            dict(c_a=-1.0),
            dict(q_in=31),
        ],
    )
    def test_invalid_configs_raise(self, kwargs):
        with pytest.raises(InvalidInput):
            FakeQuantConfig(**kwargs)
