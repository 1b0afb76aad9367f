"""Model graph tests: geometry, gradients, folding, checkpoints.

Gradient strategy, since quantizer nodes make the true loss piecewise
constant in most parameters:

* plain-float mode is fully differentiable, so every parameter gets a
  central-difference check there (validates conv/BN/ReLU/softmax
  backward);
* the batch-norm fold formulas are checked by finite differences on a
  quantizer-free scalar function of the folded tensors;
* the fake-quant modes are checked against an independently written
  per-tap einsum backward that applies the same straight-through
  convention (validates gradient routing and masks);
* the one smooth path in fake-quant mode (classifier bias to logits)
  gets a direct finite-difference check.
"""

import numpy as np
import pytest

from fxpkws import container
from fxpkws.errors import InvalidInput, LayoutError, ShapeError
from fxpkws.model import (
    BatchNormParams,
    ConvSpec,
    ModelSpec,
    StandardizationStats,
    TrainedModel,
    backward,
    batchnorm_backward,
    batchnorm_forward,
    clone_model,
    conv_backward,
    conv_forward,
    cross_entropy,
    default_spec,
    desk_spec,
    effective_block_params,
    fold_batchnorm,
    forward,
    init_model,
    load_checkpoint,
    profile_spec,
    save_checkpoint,
    softmax,
    tiny_spec,
)
from fxpkws.quantizers import FakeQuantConfig, fake_quant_unit


def naive_conv(x, w, stride):
    """Loop-based VALID convolution oracle."""
    b, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    sh, sw = stride
    oh = (h - kh) // sh + 1
    ow = (wd - kw) // sw + 1
    out = np.zeros((b, oh, ow, cout))
    for bi in range(b):
        for oy in range(oh):
            for ox in range(ow):
                patch = x[bi, oy * sh:oy * sh + kh, ox * sw:ox * sw + kw, :]
                for co in range(cout):
                    out[bi, oy, ox, co] = np.sum(patch * w[:, :, :, co])
    return out


def fd_grad_at(loss_fn, arr, indices, h=1e-6):
    """Central differences of loss_fn wrt flat entries of arr."""
    flat = arr.reshape(-1)
    out = {}
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        fp = loss_fn()
        flat[i] = old - h
        fm = loss_fn()
        flat[i] = old
        out[int(i)] = (fp - fm) / (2.0 * h)
    return out


def assert_grads_match(analytic, fd, rtol=1e-4, atol=1e-7):
    a_flat = analytic.reshape(-1)
    for i, g_fd in fd.items():
        assert a_flat[i] == pytest.approx(g_fd, rel=rtol, abs=atol), (
            f"index {i}: analytic {a_flat[i]} vs fd {g_fd}")


class TestSpecs:
    def test_default_geometry(self):
        spec = default_spec(35)
        assert spec.hidden_shapes() == [
            (25, 16, 32), (8, 7, 40), (1, 1, 128), (1, 1, 160), (1, 1, 35)]
        assert spec.param_count() == 191419
        assert spec.macs_total() == 1469920

    def test_param_count_matches_walker(self):
        spec = default_spec(35)
        total = 0
        for blk in spec.blocks:
            kh, kw = blk.kernel
            total += kh * kw * blk.in_ch * blk.out_ch + blk.out_ch
            if blk.has_bn:
                total += 2 * blk.out_ch
        assert total == spec.param_count()

    def test_macs_match_walker(self):
        spec = desk_spec(4)
        hw = spec.input_shape[:2]
        total = 0
        for blk in spec.blocks:
            hw = blk.out_hw(hw)
            total += hw[0] * hw[1] * blk.out_ch * blk.kernel[0] * blk.kernel[1] * blk.in_ch
        assert total == spec.macs_total()

    def test_num_classes_flows_to_classifier(self):
        for n in (2, 4, 12, 35):
            spec = default_spec(n)
            assert spec.blocks[-1].out_ch == n
            assert spec.hidden_shapes()[-1] == (1, 1, n)

    def test_profile_spec_has_no_bn(self):
        spec = profile_spec(4)
        assert not any(blk.has_bn for blk in spec.blocks)

    def test_channel_mismatch_rejected(self):
        blocks = (
            ConvSpec((3, 4), 1, 8, (3, 4)),
            ConvSpec((4, 4), 9, 4, (3, 2), has_bn=False, activate=False),
        )
        with pytest.raises(ShapeError):
            ModelSpec(blocks=blocks, num_classes=4)

    def test_classifier_with_bn_rejected(self):
        blocks = (ConvSpec((76, 64), 1, 4, (1, 1), has_bn=True, activate=False),)
        with pytest.raises(InvalidInput):
            ModelSpec(blocks=blocks, num_classes=4)

    def test_non_collapsed_spatial_rejected(self):
        blocks = (ConvSpec((3, 4), 1, 4, (3, 4), has_bn=False, activate=False),)
        with pytest.raises(ShapeError):
            ModelSpec(blocks=blocks, num_classes=4)

    def test_kernel_larger_than_input_rejected(self):
        with pytest.raises(ShapeError):
            ConvSpec((80, 4), 1, 4, (1, 1)).out_hw((76, 64))


class TestConvPrimitive:
    @pytest.mark.parametrize("shape,kernel,stride", [
        ((2, 9, 8, 3), (3, 4), (3, 4)),
        ((1, 8, 7, 4), (4, 4), (3, 2)),
        ((3, 7, 4, 2), (7, 4), (2, 4)),
        ((2, 1, 1, 5), (1, 1), (1, 1)),
        ((1, 6, 6, 1), (2, 2), (1, 1)),
    ])
    def test_forward_matches_naive(self, shape, kernel, stride):
        rng = np.random.default_rng(hash((shape, kernel, stride)) % 2**32)
        x = rng.normal(size=shape)
        w = rng.normal(size=(*kernel, shape[3], 3))
        got = conv_forward(x, w, stride)
        np.testing.assert_allclose(got, naive_conv(x, w, stride), rtol=1e-12, atol=1e-12)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 6, 5, 2))
        w = rng.normal(size=(3, 2, 2, 3))
        stride = (2, 1)
        proj = rng.normal(size=conv_forward(x, w, stride).shape)

        def loss():
            return float(np.sum(conv_forward(x, w, stride) * proj))

        d_x, d_w = conv_backward(x, w, stride, proj)
        assert_grads_match(d_w, fd_grad_at(loss, w, range(w.size)), rtol=1e-6)
        assert_grads_match(d_x, fd_grad_at(loss, x, range(x.size)), rtol=1e-6)


class TestBatchNorm:
    def test_train_mode_uses_batch_stats(self):
        rng = np.random.default_rng(3)
        z = rng.normal(2.0, 3.0, size=(4, 5, 6, 2))
        bn = BatchNormParams.identity(2)
        out, _ = batchnorm_forward(z, bn, train_mode=True)
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=(0, 1, 2)), 1.0, atol=1e-3)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(3, 4, 2, 2))
        bn = BatchNormParams(gamma=rng.uniform(0.5, 2, 2), beta=rng.normal(size=2),
                             running_mean=np.zeros(2), running_var=np.ones(2))
        proj = rng.normal(size=z.shape)

        def loss():
            out, _ = batchnorm_forward(z, bn, train_mode=True)
            return float(np.sum(out * proj))

        _, cache = batchnorm_forward(z, bn, train_mode=True)
        d_z, d_gamma, d_beta = batchnorm_backward(proj, cache)
        assert_grads_match(d_z, fd_grad_at(loss, z, range(0, z.size, 5)), rtol=1e-5)
        assert_grads_match(d_gamma, fd_grad_at(loss, bn.gamma, range(2)), rtol=1e-5)
        assert_grads_match(d_beta, fd_grad_at(loss, bn.beta, range(2)), rtol=1e-5)

    @pytest.mark.parametrize("seed", range(100))
    def test_fold_matches_eval_bn(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 5, 5, 2))
        w = rng.normal(size=(2, 2, 2, 3))
        bias = rng.normal(size=3)
        bn = BatchNormParams(
            gamma=rng.uniform(0.2, 3.0, 3), beta=rng.normal(size=3),
            running_mean=rng.normal(size=3), running_var=rng.uniform(0.05, 4.0, 3))
        direct, _ = batchnorm_forward(conv_forward(x, w, (1, 1)) + bias, bn, train_mode=False)
        w_f, b_f = fold_batchnorm(w, bias, bn)
        folded = conv_forward(x, w_f, (1, 1)) + b_f
        np.testing.assert_allclose(folded, direct, rtol=1e-9, atol=1e-11)


def make_model(fq=None, seed=0, spec=None, frozen=False):
    spec = spec or tiny_spec(3)
    fq = fq or FakeQuantConfig(enabled=False)
    model = init_model(spec, fq, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for bp in model.params:
        bp.bias += rng.normal(0, 0.05, bp.bias.shape)
        if bp.bn is not None:
            bp.bn.gamma = rng.uniform(0.7, 1.4, bp.bn.gamma.shape)
            bp.bn.beta = rng.normal(0, 0.1, bp.bn.beta.shape)
            bp.bn.running_mean = rng.normal(0, 0.1, bp.bn.running_mean.shape)
            bp.bn.running_var = rng.uniform(0.5, 1.5, bp.bn.running_var.shape)
    if frozen:
        model.bn_frozen = True
    return model


def batch_for(model, n=2, seed=11):
    rng = np.random.default_rng(seed)
    h, w, c = model.spec.input_shape
    x = rng.normal(0, 0.7, size=(n, h, w, c))
    y = rng.integers(0, model.spec.num_classes, size=n)
    return x, y


class TestPlainGradients:
    def test_full_finite_difference_check(self):
        model = make_model()
        x, y = batch_for(model)

        def loss():
            return cross_entropy(forward(model, x, train_mode=True, update_running=False), y)

        probs, cache = forward(model, x, train_mode=True, return_cache=True,
                               update_running=False)
        grads = backward(model, cache, probs, y)
        rng = np.random.default_rng(0)
        for bi, (bp, g) in enumerate(zip(model.params, grads)):
            n_w = bp.raw_w.size
            idx = rng.choice(n_w, size=min(40, n_w), replace=False)
            assert_grads_match(g["raw_w"], fd_grad_at(loss, bp.raw_w, idx))
            assert_grads_match(g["bias"], fd_grad_at(loss, bp.bias, range(bp.bias.size)))
            if bp.bn is not None:
                assert_grads_match(g["gamma"], fd_grad_at(loss, bp.bn.gamma,
                                                          range(bp.bn.gamma.size)))
                assert_grads_match(g["beta"], fd_grad_at(loss, bp.bn.beta,
                                                         range(bp.bn.beta.size)))

    def test_gradcheck_is_fast(self):
        # The full check above must stay cheap enough for CI; this guards
        # the spec size rather than wall time.
        assert tiny_spec(3).param_count() < 1500


class TestFoldChainGradients:
    """Finite-difference validation of the folded-parameter chain rule."""

    def test_fold_formulas_match_fd(self):
        rng = np.random.default_rng(21)
        shape = (2, 3, 4, 5)
        raw = rng.normal(0, 0.8, shape)
        bias = rng.normal(0, 0.3, 5)
        bn = BatchNormParams(
            gamma=rng.uniform(0.5, 2.0, 5), beta=rng.normal(size=5),
            running_mean=rng.normal(size=5), running_var=rng.uniform(0.3, 2.0, 5))
        up_w = rng.normal(size=shape)
        up_b = rng.normal(size=5)

        def loss():
            w_f, b_f = fold_batchnorm(np.tanh(raw), bias, bn)
            return float(np.sum(w_f * up_w) + np.sum(b_f * up_b))

        t = np.tanh(raw)
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
        scale = bn.gamma * inv_std
        d_raw = up_w * scale * (1.0 - t * t)
        d_gamma = (np.sum(up_w * t, axis=(0, 1, 2))
                   + up_b * (bias - bn.running_mean)) * inv_std
        d_beta = up_b
        d_bias = up_b * scale

        idx = np.random.default_rng(1).choice(raw.size, 30, replace=False)
        assert_grads_match(d_raw, fd_grad_at(loss, raw, idx), rtol=1e-6)
        assert_grads_match(d_gamma, fd_grad_at(loss, bn.gamma, range(5)), rtol=1e-6)
        assert_grads_match(d_beta, fd_grad_at(loss, bn.beta, range(5)), rtol=1e-6)
        assert_grads_match(d_bias, fd_grad_at(loss, bias, range(5)), rtol=1e-6)


def einsum_conv_grads(x, w, stride, d_z):
    """Per-tap einsum conv gradients, independent of the package im2col."""
    kh, kw, _, _ = w.shape
    sh, sw = stride
    _, oh, ow, _ = d_z.shape
    d_w = np.zeros_like(w)
    d_x = np.zeros_like(x)
    for a in range(kh):
        for b in range(kw):
            xs = x[:, a:a + oh * sh:sh, b:b + ow * sw:sw, :]
            d_w[a, b] = np.einsum("byxi,byxo->io", xs, d_z)
            d_x[:, a:a + oh * sh:sh, b:b + ow * sw:sw, :] += np.einsum(
                "byxo,io->byxi", d_z, w[a, b])
    return d_w, d_x


def reference_backward(model, cache, probs, labels):
    """Straight-through reference for the fake-quant modes."""
    fq = model.fq
    n = probs.shape[0]
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    d_x = ((probs - onehot) / n).reshape(n, 1, 1, -1)
    grads = []
    for i in reversed(range(len(model.spec.blocks))):
        blk, bp, bc = model.spec.blocks[i], model.params[i], cache["blocks"][i]
        g = {}
        if blk.activate:
            d_z = d_x * ((bc["pre_act"] > 0.0) & (bc["pre_act"] < fq.c_a))
        else:
            d_z = d_x
        if not model.bn_frozen:
            if bp.bn is not None:
                xhat, inv_std, gamma, _ = bc["bn"]
                d_xhat = d_z * gamma
                g["gamma"] = np.sum(d_z * xhat, axis=(0, 1, 2))
                g["beta"] = np.sum(d_z, axis=(0, 1, 2))
                d_z = inv_std * (d_xhat - d_xhat.mean(axis=(0, 1, 2))
                                 - xhat * (d_xhat * xhat).mean(axis=(0, 1, 2)))
            g["bias"] = d_z.sum(axis=(0, 1, 2))
            t = np.tanh(bp.raw_w)
            w_q = fake_quant_unit(t, fq.b_w)
            d_w, d_x = einsum_conv_grads(bc["x"], w_q, blk.stride, d_z)
            g["raw_w"] = d_w * (1.0 - t * t)
        else:
            d_b = d_z.sum(axis=(0, 1, 2))
            d_w, d_x = einsum_conv_grads(bc["x"], bc["w_q"], blk.stride, d_z)
            d_w = d_w * (np.abs(bc["w_fold_pre"]) <= 1.0)
            t = np.tanh(bp.raw_w)
            if bp.bn is not None:
                inv_std = 1.0 / np.sqrt(bp.bn.running_var + bp.bn.eps)
                scale = bp.bn.gamma * inv_std
                g["raw_w"] = d_w * scale * (1.0 - t * t)
                g["gamma"] = (np.sum(d_w * t, axis=(0, 1, 2))
                              + d_b * (bp.bias - bp.bn.running_mean)) * inv_std
                g["beta"] = d_b
                g["bias"] = d_b * scale
            else:
                g["raw_w"] = d_w * (1.0 - t * t)
                g["bias"] = d_b
        grads.append(g)
    return list(reversed(grads))


class TestQuantizedGradients:
    @pytest.mark.parametrize("frozen", [False, True])
    def test_backward_matches_reference(self, frozen):
        fq = FakeQuantConfig(b_w=8, b_a=8, b_in=8, q_in=4, enabled=True)
        model = make_model(fq=fq, seed=5, frozen=frozen)
        x, y = batch_for(model, n=3, seed=6)
        probs, cache = forward(model, x, train_mode=not frozen, return_cache=True,
                               update_running=False)
        got = backward(model, cache, probs, y)
        want = reference_backward(model, cache, probs, y)
        for g_got, g_want in zip(got, want):
            assert set(g_got) == set(g_want)
            for key in g_got:
                np.testing.assert_allclose(g_got[key], g_want[key],
                                           rtol=1e-9, atol=1e-12, err_msg=key)

    def test_classifier_bias_fd_in_live_mode(self):
        fq = FakeQuantConfig(b_w=8, b_a=8, b_in=8, q_in=4, enabled=True)
        model = make_model(fq=fq, seed=8)
        x, y = batch_for(model, n=2, seed=9)

        def loss():
            return cross_entropy(
                forward(model, x, train_mode=True, update_running=False), y)

        probs, cache = forward(model, x, train_mode=True, return_cache=True,
                               update_running=False)
        grads = backward(model, cache, probs, y)
        bias = model.params[-1].bias
        assert_grads_match(grads[-1]["bias"], fd_grad_at(loss, bias, range(bias.size)),
                           rtol=1e-5)

    def test_activation_mask_zeroes_saturated_units(self):
        fq = FakeQuantConfig(b_w=8, b_a=8, b_in=8, q_in=4, enabled=True)
        model = make_model(fq=fq, seed=12)
        x, y = batch_for(model, n=2, seed=13)
        probs, cache = forward(model, x, train_mode=True, return_cache=True,
                               update_running=False)
        # Push every pre-activation of block 0 outside the pass band and
        # confirm its weight gradient vanishes.
        cache["blocks"][0]["pre_act"] = np.full_like(cache["blocks"][0]["pre_act"], 2.0)
        grads = backward(model, cache, probs, y)
        assert np.all(grads[0]["raw_w"] == 0.0)
        assert np.all(grads[0]["bias"] == 0.0)


class TestForwardModes:
    def test_posteriors_normalized(self):
        for seed in range(5):
            model = make_model(seed=seed)
            x, _ = batch_for(model, n=4, seed=seed)
            probs = forward(model, x)
            assert np.all(probs >= 0) and np.all(probs <= 1)
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-12)

    def test_zero_weights_give_uniform_posterior(self):
        for enabled in (False, True):
            fq = FakeQuantConfig(b_w=8, b_a=8, b_in=8, q_in=4, enabled=enabled)
            model = init_model(tiny_spec(3), fq, seed=0)
            for bp in model.params:
                bp.raw_w[:] = 0.0
                bp.bias[:] = 0.0
            x, _ = batch_for(model, n=2)
            probs = forward(model, x)
            assert np.all(probs == probs[0, 0])
            np.testing.assert_allclose(probs, 1.0 / 3.0, rtol=1e-15)

    def test_wide_weights_bound_logit_error(self):
        # Single 1x1 classifier over 4 input channels: at 16-bit weights
        # each weight moves by at most half a grid step (2^-16), so with
        # inputs bounded by 1 the logits move by at most 4 * 2^-16 = 2^-14.
        spec = ModelSpec(
            blocks=(ConvSpec((1, 1), 4, 2, (1, 1), has_bn=False, activate=False),),
            num_classes=2, input_shape=(1, 1, 4))
        fq = FakeQuantConfig(b_w=16, b_a=8, b_in=8, q_in=7, enabled=True)
        model = init_model(spec, fq, seed=3)
        rng = np.random.default_rng(4)
        model.params[0].raw_w[:] = rng.uniform(-2.0, 2.0, model.params[0].raw_w.shape)
        codes = rng.integers(-128, 128, size=(64, 1, 1, 4))
        x = codes * 2.0 ** -7
        _, cache = forward(model, x, return_cache=True)
        ideal = (x.reshape(64, 4) @ np.tanh(model.params[0].raw_w).reshape(4, 2))
        err = np.abs(cache["logits"] - ideal).max()
        assert err <= 2.0 ** -14 + 1e-15

    def test_frozen_forward_is_stateless_and_deterministic(self):
        fq = FakeQuantConfig(b_w=8, b_a=8, b_in=8, q_in=4, enabled=True)
        model = make_model(fq=fq, seed=2, frozen=True)
        x, _ = batch_for(model, n=3)
        p1 = forward(model, x)
        p2 = forward(model, x)
        np.testing.assert_array_equal(p1, p2)

    def test_running_stats_update_only_when_asked(self):
        model = make_model(seed=14)
        x, _ = batch_for(model)
        before = model.params[0].bn.running_mean.copy()
        forward(model, x, train_mode=True, update_running=False)
        np.testing.assert_array_equal(model.params[0].bn.running_mean, before)
        forward(model, x, train_mode=True)
        assert not np.array_equal(model.params[0].bn.running_mean, before)

    def test_fq_forward_requires_q_in(self):
        fq = FakeQuantConfig(enabled=True)  # q_in stays None
        model = init_model(tiny_spec(3), fq, seed=0)
        x, _ = batch_for(model)
        with pytest.raises(InvalidInput, match="q_in"):
            forward(model, x)

    def test_bad_input_shape_rejected(self):
        model = make_model()
        with pytest.raises(ShapeError):
            forward(model, np.zeros((2, 10, 10)))
        with pytest.raises(InvalidInput):
            forward(model, np.full((2, 76, 64), np.nan))

    def test_effective_params_land_on_grids(self):
        fq = FakeQuantConfig(b_w=8, b_a=8, b_in=8, q_in=4, enabled=True)
        model = make_model(fq=fq, seed=6, frozen=True)
        for i in range(len(model.spec.blocks)):
            _, w_q, bias_q = effective_block_params(model, i)
            w_codes = w_q * 2.0 ** (fq.b_w - 1)
            np.testing.assert_array_equal(w_codes, np.round(w_codes))
            assert np.abs(w_codes).max() <= 2 ** (fq.b_w - 1) - 1
            b_codes = bias_q * 2.0 ** model.acc_qformat(i)
            np.testing.assert_array_equal(b_codes, np.round(b_codes))


class TestCheckpoint:
    def test_round_trip_casts_to_float32(self, tmp_path):
        fq = FakeQuantConfig(b_w=8, b_a=8, b_in=8, q_in=4, method="acr", enabled=True)
        model = make_model(fq=fq, seed=9)
        model.stats = StandardizationStats(
            mean=np.linspace(-1, 1, 64), std=np.full(64, 0.5), max_abs=4.0)
        path = tmp_path / "m.kwsm"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.spec == model.spec
        assert loaded.fq.b_w == 8 and loaded.fq.method == "acr"
        assert loaded.fq.q_in == 4
        assert loaded.bn_frozen == model.bn_frozen
        np.testing.assert_allclose(loaded.stats.mean, model.stats.mean, atol=1e-6)
        assert loaded.stats.max_abs == 4.0
        for bp_l, bp_m in zip(loaded.params, model.params):
            np.testing.assert_array_equal(
                bp_l.raw_w, bp_m.raw_w.astype(np.float32).astype(np.float64))
            np.testing.assert_array_equal(
                bp_l.bias, bp_m.bias.astype(np.float32).astype(np.float64))
            if bp_m.bn is not None:
                np.testing.assert_array_equal(
                    bp_l.bn.gamma, bp_m.bn.gamma.astype(np.float32).astype(np.float64))
                assert bp_l.bn.eps == bp_m.bn.eps

    def test_resave_is_byte_identical(self, tmp_path):
        model = make_model(seed=10)
        p1, p2 = tmp_path / "a.kwsm", tmp_path / "b.kwsm"
        save_checkpoint(model, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_frozen_flag_survives(self, tmp_path):
        fq = FakeQuantConfig(b_w=8, b_a=8, b_in=8, q_in=4, enabled=True)
        model = make_model(fq=fq, seed=1, frozen=True)
        path = tmp_path / "f.kwsm"
        save_checkpoint(model, path)
        assert load_checkpoint(path).bn_frozen is True

    def test_wrong_schema_rejected(self, tmp_path):
        path = tmp_path / "alien.kwsm"
        container.write_container(path, b"KWSM", 1, {"schema": "other/v9"}, {})
        with pytest.raises(LayoutError, match="schema"):
            load_checkpoint(path)

    def test_clone_is_independent(self):
        model = make_model(seed=15)
        twin = clone_model(model)
        twin.params[0].raw_w += 1.0
        twin.params[1].bn.gamma *= 2.0
        x, _ = batch_for(model)
        assert not np.allclose(forward(model, x), forward(twin, x))

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(5, 7))
        np.testing.assert_allclose(softmax(logits), softmax(logits + 123.0),
                                   rtol=1e-12)
