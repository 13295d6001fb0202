"""Binarization, straight-through gradients, clipping, LR rescaling."""

import numpy as np
import pytest

from bnnkit.binary import (BinaryBlockConfig, LatentWeight, binarize_sign,
                           binary_conv_block, binary_conv_block_backward,
                           clip_latent, glorot_lr_scale, hard_tanh,
                           ste_backward)
from bnnkit.ops import BatchNormState, ConvParams, batchnorm, conv2d
from helpers import numerical_gradient, rel_error


class TestBinarizeSign:
    def test_basic_values(self):
        out = binarize_sign(np.array([0.3, -0.7]))
        np.testing.assert_array_equal(out, [1.0, -1.0])

    def test_zero_maps_to_plus_one(self):
        assert binarize_sign(np.array([0.0]))[0] == 1.0

    def test_idempotent_on_outputs(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(100)
        once = binarize_sign(x)
        np.testing.assert_array_equal(binarize_sign(once), once)

    def test_preserves_dtype(self):
        assert binarize_sign(np.zeros(3, dtype=np.float32)).dtype == np.float32
        assert binarize_sign(np.zeros(3, dtype=np.float64)).dtype == np.float64


class TestSteBackward:
    def test_passes_inside_clip_range(self):
        assert ste_backward(np.array([2.0]), np.array([0.5]))[0] == 2.0

    def test_blocks_outside_clip_range(self):
        assert ste_backward(np.array([2.0]), np.array([1.5]))[0] == 0.0

    def test_boundary_inclusive(self):
        g = ste_backward(np.array([3.0, -4.0]), np.array([1.0, -1.0]))
        np.testing.assert_array_equal(g, [3.0, -4.0])

    def test_mask_property(self):
        rng = np.random.default_rng(1)
        latent = rng.uniform(-2, 2, 1000)
        g = ste_backward(np.ones(1000), latent)
        np.testing.assert_array_equal(g[np.abs(latent) > 1], 0.0)
        np.testing.assert_array_equal(g[np.abs(latent) <= 1], 1.0)


class TestClipLatent:
    def test_clamps_out_of_range(self):
        w = LatentWeight(np.array([1.7, -3.0]), 1, 1, 1.0)
        clip_latent(w)
        np.testing.assert_array_equal(w.value, [1.0, -1.0])

    def test_interior_fixed_point(self):
        w = LatentWeight(np.array([0.4]), 1, 1, 1.0)
        clip_latent(w)
        assert w.value[0] == 0.4


class TestGlorotLrScale:
    def test_small_fan(self):
        assert glorot_lr_scale(3, 3) == pytest.approx(2.0)

    def test_large_fan(self):
        assert glorot_lr_scale(7500, 7500) == pytest.approx(100.0)

    def test_monotone_in_fan_sum(self):
        rng = np.random.default_rng(2)
        fans = sorted(rng.integers(1, 10000, size=20))
        scales = [glorot_lr_scale(int(f), int(f)) for f in fans]
        assert all(a < b for a, b in zip(scales, scales[1:]))

    def test_rejects_bad_fans(self):
        with pytest.raises(ValueError):
            glorot_lr_scale(0, 5)


def _block_inputs(rng, binarize_weights=True, binarize_activations=True,
                  channels=(2, 3), hw=5, dtype=np.float64):
    cin, cout = channels
    params = ConvParams(cout, cin, 3, 3, 1, 1, 1, 1)
    cfg = BinaryBlockConfig(conv=params, binarize_weights=binarize_weights,
                            binarize_activations=binarize_activations)
    x = rng.standard_normal((2, cin, hw, hw)).astype(dtype)
    w = LatentWeight(rng.uniform(-0.9, 0.9, (cout, cin, 3, 3)).astype(dtype),
                     cin * 9, cout * 9, 1.0)
    bn = BatchNormState.create(cout, dtype=dtype)
    return x, w, bn, cfg


class TestBinaryConvBlock:
    def test_degenerate_config_equals_conv_bn(self):
        rng = np.random.default_rng(3)
        x, w, bn, cfg = _block_inputs(rng, binarize_weights=False,
                                      binarize_activations=False)
        out, _ = binary_conv_block(x, w.value, bn, cfg, "train")
        bn2 = BatchNormState.create(cfg.conv.out_channels, dtype=np.float64)
        want, _ = batchnorm(conv2d(x, w.value, cfg.conv), bn2, "train")
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_all_positive_weights_binarize_to_ones(self):
        rng = np.random.default_rng(4)
        x, w, bn, cfg = _block_inputs(rng)
        w.value = np.abs(w.value) + 0.01
        out, _ = binary_conv_block(x, w, bn, cfg, "train")
        ones = np.ones_like(w.value)
        bn2 = BatchNormState.create(cfg.conv.out_channels, dtype=np.float64)
        ref, _ = batchnorm(conv2d(x, ones, cfg.conv), bn2, "train")
        np.testing.assert_array_equal(out, binarize_sign(ref))

    def test_forward_depends_only_on_latent_signs(self):
        rng = np.random.default_rng(5)
        x, w, bn, cfg = _block_inputs(rng)
        out1, _ = binary_conv_block(x, w, bn, cfg, "infer")
        # perturb latents without crossing zero
        w.value = w.value * rng.uniform(0.2, 0.9, w.value.shape)
        out2, _ = binary_conv_block(x, w, bn, cfg, "infer")
        np.testing.assert_array_equal(out1, out2)

    def test_surrogate_gradient_matches_finite_differences(self):
        # The STE backward computes the exact gradient of the block with
        # both signs replaced by hard-tanh; check that against central
        # differences of the surrogate forward.
        rng = np.random.default_rng(6)
        for trial in range(3):
            x, w, bn, cfg = _block_inputs(rng)
            r = rng.standard_normal(
                binary_conv_block(x, w, bn, cfg, "train")[0].shape)

            def loss(latent):
                lw = LatentWeight(latent, w.fan_in, w.fan_out, 1.0)
                out, _ = binary_conv_block(x, lw, bn, cfg, "train",
                                           surrogate=True)
                return float((out * r).sum())

            _, cache = binary_conv_block(x, w, bn, cfg, "train", surrogate=True)
            _, grads = binary_conv_block_backward(r, cache)
            ng = numerical_gradient(loss, w.value.copy(), eps=1e-4)
            assert rel_error(grads["weight"], ng) < 1e-3

    def test_surrogate_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x, w, bn, cfg = _block_inputs(rng)
        r = rng.standard_normal(
            binary_conv_block(x, w, bn, cfg, "train")[0].shape)

        def loss(v):
            out, _ = binary_conv_block(v, w, bn, cfg, "train", surrogate=True)
            return float((out * r).sum())

        _, cache = binary_conv_block(x, w, bn, cfg, "train", surrogate=True)
        gx, _ = binary_conv_block_backward(r, cache)
        ng = numerical_gradient(loss, x.copy(), eps=1e-4)
        assert rel_error(gx, ng) < 1e-3

    def test_pooled_block_pools_before_batchnorm(self):
        rng = np.random.default_rng(8)
        x, w, bn, cfg = _block_inputs(rng, hw=6)
        out, _ = binary_conv_block(x, w, bn, cfg, "infer", pool=(2, 2, 0))
        from bnnkit.ops import maxpool2d
        z = conv2d(x, binarize_sign(w.value), cfg.conv)
        p, _ = maxpool2d(z, 2, 2, 0)
        want, _ = batchnorm(p, bn, "infer")
        np.testing.assert_array_equal(out, binarize_sign(want))

    def test_hard_tanh_is_clip(self):
        x = np.array([-2.0, -0.5, 0.5, 2.0])
        np.testing.assert_array_equal(hard_tanh(x), [-1.0, -0.5, 0.5, 1.0])
