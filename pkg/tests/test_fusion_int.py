"""Conv-BN folding equivalence and the integer convolution path."""

import numpy as np
import pytest

from frostnet import Tensor, ops
from frostnet.fusion import FusedConv, fuse_conv_bn
from frostnet.intops import (chunked_int_gemm, int_add, int_channel_multiply,
                             int_concat, int_conv2d, int_global_avgpool,
                             hard_sigmoid_lut, QuantizedConv)
from frostnet.quant import (SIGNED, UNSIGNED, compute_qparams, dequantize,
                            fake_quantize, quantize, weight_qparams)


def run_conv_bn(x, w, gamma, beta, mean, var, eps, stride, pad, act="none"):
    y = ops.conv2d(Tensor(x), Tensor(w), None, stride, pad)
    y = ops.batchnorm2d(y, Tensor(gamma), Tensor(beta), Tensor(mean),
                        Tensor(var), eps, training=False)
    if act != "none":
        y = ops.activation(y, act)
    return y.data


def run_fused(x, fused):
    y = ops.conv2d(Tensor(x), Tensor(fused.weight), Tensor(fused.bias),
                   fused.stride, fused.padding, fused.groups)
    if fused.activation != "none":
        y = ops.activation(y, fused.activation)
    return y.data


class TestFusion:
    def test_identity_bn_is_noop(self, rng):
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        eps = 1e-5
        fused = fuse_conv_bn(w, None, np.ones(4), np.zeros(4), np.zeros(4),
                             np.ones(4) - eps, eps=eps, padding=1)
        np.testing.assert_allclose(fused.weight, w, rtol=1e-6)
        np.testing.assert_allclose(fused.bias, 0.0, atol=1e-7)

    @pytest.mark.parametrize("trial", range(25))
    def test_equivalence_random_layers(self, trial):
        rng = np.random.default_rng(trial)
        cin, cout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        k = int(rng.choice([1, 3, 5]))
        gamma = rng.uniform(0.5, 2.0, cout).astype(np.float32)
        beta = rng.standard_normal(cout).astype(np.float32)
        mean = rng.standard_normal(cout).astype(np.float32)
        var = rng.uniform(0.1, 2.0, cout).astype(np.float32)
        # realistic trained-network weight magnitudes
        w = (rng.standard_normal((cout, cin, k, k))
             * np.sqrt(2.0 / (k * k * cin))).astype(np.float32)
        fused = fuse_conv_bn(w, None, gamma, beta, mean, var, stride=1,
                             padding=k // 2)
        for _ in range(4):
            x = rng.standard_normal((2, cin, 6, 6)).astype(np.float32)
            ref = run_conv_bn(x, w, gamma, beta, mean, var, 1e-5, 1, k // 2)
            out = run_fused(x, fused)
            np.testing.assert_allclose(out, ref, atol=1e-5)

    def test_activation_preserved_through_fusion(self, rng):
        w = rng.standard_normal((2, 2, 1, 1)).astype(np.float32)
        fused = fuse_conv_bn(w, None, np.ones(2), np.full(2, -100.0),
                             np.zeros(2), np.ones(2), activation="relu")
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        out = run_fused(x, fused)
        # beta drives all pre-activations negative; relu must clamp to zero
        assert np.all(out == 0.0)

    def test_negative_variance_rejected(self):
        w = np.ones((1, 1, 1, 1), np.float32)
        with pytest.raises(ValueError, match="variance"):
            fuse_conv_bn(w, None, np.ones(1), np.zeros(1), np.zeros(1),
                         np.array([-0.1]))

    def test_conv_bias_folds(self, rng):
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        gamma = rng.uniform(0.5, 1.5, 3).astype(np.float32)
        beta = rng.standard_normal(3).astype(np.float32)
        mean = rng.standard_normal(3).astype(np.float32)
        var = rng.uniform(0.5, 1.5, 3).astype(np.float32)
        fused = fuse_conv_bn(w, b, gamma, beta, mean, var, padding=1)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        y = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1)
        ref = ops.batchnorm2d(y, Tensor(gamma), Tensor(beta), Tensor(mean),
                              Tensor(var), training=False).data
        np.testing.assert_allclose(run_fused(x, fused), ref, atol=1e-5)


class TestChunkedGemm:
    @pytest.mark.parametrize("k_dim", [16, 256, 300, 1024, 2500])
    def test_matches_int64_einsum(self, k_dim):
        rng = np.random.default_rng(k_dim)
        w = rng.integers(-255, 256, (7, k_dim)).astype(np.float32)
        cols = rng.integers(0, 256, (2, k_dim, 11)).astype(np.float32)
        out = chunked_int_gemm(w, cols)
        ref = np.einsum("ok,nkp->nop", w.astype(np.int64),
                        cols.astype(np.int64))
        assert np.array_equal(out, ref.astype(np.float64))


def quantized_setup(rng, cin=3, cout=4, k=3, hw=6, stride=1):
    """A random fused conv with calibrated input/weight/output stats."""
    w = (rng.standard_normal((cout, cin, k, k)) * 0.3).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32) * 0.1
    fused = FusedConv(w, b, stride, k // 2, 1, "none")
    in_stats = compute_qparams(-2.0, 2.0, UNSIGNED)
    w_stats = weight_qparams(w)
    x = rng.uniform(-2, 2, (2, cin, hw, hw)).astype(np.float32)
    ref = ops.conv2d(Tensor(dequantize(quantize(x, in_stats), in_stats)
                            .astype(np.float32)),
                     Tensor(dequantize(quantize(w, w_stats), w_stats)
                            .astype(np.float32)),
                     Tensor(b), stride, k // 2).data
    out_stats = compute_qparams(float(ref.min()), float(ref.max()), UNSIGNED)
    return fused, in_stats, w_stats, out_stats, x, ref


class TestIntConv:
    def test_zero_point_input_gives_bias(self, rng):
        fused, in_stats, w_stats, out_stats, _, _ = quantized_setup(rng)
        x_q = np.full((1, 3, 6, 6), in_stats.zero_point, np.uint8)
        out = int_conv2d(x_q, fused, in_stats, w_stats, out_stats)
        expect = quantize(np.broadcast_to(fused.bias.reshape(1, -1, 1, 1),
                                          out.shape), out_stats)
        assert np.abs(out.astype(np.int32) - expect).max() <= 1

    @pytest.mark.parametrize("trial", range(10))
    def test_dual_path_agreement(self, trial):
        rng = np.random.default_rng(200 + trial)
        stride = int(rng.choice([1, 2]))
        fused, in_stats, w_stats, out_stats, x, ref = quantized_setup(
            rng, cin=int(rng.integers(1, 5)), cout=int(rng.integers(1, 5)),
            k=int(rng.choice([1, 3, 5])), stride=stride)
        x_q = quantize(x, in_stats).astype(np.uint8)
        out_int = int_conv2d(x_q, fused, in_stats, w_stats, out_stats)
        # fake-quant simulated path with identical statistics
        sim = fake_quantize(Tensor(ref), out_stats).data
        sim_q = quantize(sim, out_stats)
        assert np.abs(out_int.astype(np.int32) - sim_q).max() <= 1

    def test_identity_pointwise_same_scale(self):
        w = np.ones((1, 1, 1, 1), np.float32)
        fused = FusedConv(w, np.zeros(1, np.float32), 1, 0, 1, "none")
        st = compute_qparams(-2.0, 2.0, UNSIGNED)
        w_stats = weight_qparams(w)
        x_q = np.arange(0, 256, dtype=np.uint8).reshape(1, 1, 16, 16)
        out = int_conv2d(x_q, fused, st, w_stats, st)
        np.testing.assert_array_equal(out, x_q)

    def test_missing_out_stats_rejected(self, rng):
        fused, in_stats, w_stats, _, _, _ = quantized_setup(rng)
        with pytest.raises(ValueError, match="out_stats"):
            QuantizedConv(fused, in_stats, w_stats, None)

    def test_depthwise_int(self, rng):
        c = 4
        w = (rng.standard_normal((c, 1, 3, 3)) * 0.2).astype(np.float32)
        fused = FusedConv(w, np.zeros(c, np.float32), 1, 1, c, "none")
        in_stats = compute_qparams(-1.0, 1.0, UNSIGNED)
        w_stats = weight_qparams(w)
        x = rng.uniform(-1, 1, (1, c, 8, 8)).astype(np.float32)
        x_deq = dequantize(quantize(x, in_stats), in_stats).astype(np.float32)
        w_deq = dequantize(quantize(w, w_stats), w_stats).astype(np.float32)
        ref = ops.conv2d(Tensor(x_deq), Tensor(w_deq), None, 1, 1, c).data
        out_stats = compute_qparams(float(ref.min()), float(ref.max()), UNSIGNED)
        out = int_conv2d(quantize(x, in_stats).astype(np.uint8), fused,
                         in_stats, w_stats, out_stats)
        sim_q = quantize(ref, out_stats)
        assert np.abs(out.astype(np.int32) - sim_q).max() <= 1

    def test_fused_relu_clamps_at_zero_point(self, rng):
        fused, in_stats, w_stats, out_stats, x, _ = quantized_setup(rng)
        fused.activation = "relu"
        x_q = quantize(x, in_stats).astype(np.uint8)
        out = int_conv2d(x_q, fused, in_stats, w_stats, out_stats)
        assert out.min() >= out_stats.zero_point


class TestIntStructural:
    def test_int_add_matches_float(self, rng):
        a = rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float32)
        b = rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float32)
        sa = compute_qparams(-1.0, 1.0, UNSIGNED)
        sb = compute_qparams(-1.5, 1.5, UNSIGNED)
        so = compute_qparams(-2.5, 2.5, UNSIGNED)
        out = int_add(quantize(a, sa).astype(np.uint8), sa,
                      quantize(b, sb).astype(np.uint8), sb, so)
        ref = quantize(dequantize(quantize(a, sa), sa)
                       + dequantize(quantize(b, sb), sb), so)
        assert np.abs(out.astype(np.int32) - ref).max() <= 1

    def test_int_concat_same_stats_is_exact(self, rng):
        st = compute_qparams(-1.0, 1.0, UNSIGNED)
        a = rng.integers(0, 256, (1, 3, 4, 4)).astype(np.uint8)
        b = rng.integers(0, 256, (1, 2, 4, 4)).astype(np.uint8)
        out = int_concat([a, b], [st, st], st)
        np.testing.assert_array_equal(out, np.concatenate([a, b], axis=1))

    def test_int_gap(self, rng):
        st = compute_qparams(-1.0, 1.0, UNSIGNED)
        x = rng.integers(0, 256, (2, 3, 7, 7)).astype(np.uint8)
        out = int_global_avgpool(x, st)
        ref = quantize(dequantize(x.astype(np.int32), st)
                       .mean(axis=(2, 3), keepdims=True), st)
        assert np.abs(out.astype(np.int32) - ref).max() <= 1

    def test_hard_sigmoid_lut(self):
        in_st = compute_qparams(-6.0, 6.0, UNSIGNED)
        out_st = compute_qparams(0.0, 1.0, UNSIGNED)
        lut = hard_sigmoid_lut(in_st, out_st)
        q = np.arange(256, dtype=np.uint8)
        x = dequantize(q.astype(np.int32), in_st)
        ref = quantize(np.minimum(np.maximum(x + 3, 0), 6) / 6, out_st)
        assert np.abs(lut.astype(np.int32) - ref).max() <= 1

    def test_int_channel_multiply(self, rng):
        xs = compute_qparams(-2.0, 2.0, UNSIGNED)
        gs = compute_qparams(0.0, 1.0, UNSIGNED)
        os_ = compute_qparams(-2.0, 2.0, UNSIGNED)
        x = rng.integers(0, 256, (2, 4, 3, 3)).astype(np.uint8)
        g = rng.integers(0, 256, (2, 4, 1, 1)).astype(np.uint8)
        out = int_channel_multiply(x, xs, g, gs, os_)
        ref = quantize(dequantize(x.astype(np.int32), xs)
                       * dequantize(g.astype(np.int32), gs), os_)
        assert np.abs(out.astype(np.int32) - ref).max() <= 1
