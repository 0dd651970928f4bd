"""Quantization statistics, quantize/dequantize, fake-quant STE, observers."""

import numpy as np
import pytest

from frostnet import Tensor, ops
from frostnet.quant import (Observer, QuantStats, SIGNED, UNSIGNED,
                            compute_qparams, dequantize, fake_quantize,
                            quantize, weight_qparams)


class TestComputeQparams:
    def test_simple_unsigned_range(self):
        st = compute_qparams(0.0, 25.5, UNSIGNED)
        assert st.scale == pytest.approx(0.1)
        assert st.zero_point == 0

    def test_zero_exactly_representable(self):
        st = compute_qparams(-1.0, 1.0, UNSIGNED)
        assert dequantize(np.array([st.zero_point]), st)[0] == 0.0
        assert st.repr_min <= st.zero_point <= st.repr_max

    def test_positive_range_clamped_to_zero(self):
        st = compute_qparams(3.0, 7.0, UNSIGNED)
        assert st.min_val == 0.0
        assert st.scale == pytest.approx(7.0 / 255)
        assert st.zero_point == 0

    def test_negative_range_clamped_to_zero(self):
        st = compute_qparams(-7.0, -3.0, UNSIGNED)
        assert st.max_val == 0.0
        assert st.zero_point == 255

    def test_degenerate_range(self):
        st = compute_qparams(0.0, 0.0, UNSIGNED)
        assert st.scale == 1.0
        assert dequantize(np.array([st.zero_point]), st)[0] == 0.0

    def test_nan_rejected(self):
        with pytest.raises(ValueError, match="NaN"):
            compute_qparams(float("nan"), 1.0)

    def test_inverted_range_rejected(self):
        with pytest.raises(ValueError):
            compute_qparams(2.0, 1.0)

    def test_signed_weights(self):
        st = compute_qparams(-0.5, 0.3, SIGNED)
        assert st.repr_min == -128 and st.repr_max == 127
        assert dequantize(np.array([st.zero_point]), st)[0] == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_zero_exactness_random(self, seed):
        r = np.random.default_rng(seed)
        lo, hi = sorted(r.uniform(-10, 10, 2))
        for sg in (SIGNED, UNSIGNED):
            st = compute_qparams(lo, hi, sg)
            assert dequantize(np.array([st.zero_point]), st)[0] == 0.0


class TestQuantizeDequantize:
    def test_zeros_map_to_zero_point(self):
        st = compute_qparams(-1.0, 3.0, UNSIGNED)
        q = quantize(np.zeros(16, np.float32), st)
        assert np.all(q == st.zero_point)
        np.testing.assert_array_equal(dequantize(q, st), 0.0)

    def test_roundtrip_bound_sweep(self):
        # |x - deq(q(x))| <= scale/2 across the whole observed range
        rng = np.random.default_rng(5)
        for _ in range(1000):
            lo, hi = sorted(rng.uniform(-20, 20, 2))
            if hi - lo < 1e-6:
                continue
            st = compute_qparams(lo, hi, rng.choice([SIGNED, UNSIGNED]))
            x = rng.uniform(st.min_val, st.max_val, 64).astype(np.float32)
            err = np.abs(x - dequantize(quantize(x, st), st))
            assert err.max() <= st.scale / 2 + 1e-7

    def test_saturation(self):
        st = compute_qparams(0.0, 10.0, UNSIGNED)
        x = np.array([st.max_val + 10 * st.scale], np.float32)
        assert quantize(x, st)[0] == st.repr_max

    def test_monotonicity(self, rng):
        st = compute_qparams(-4.0, 4.0, UNSIGNED)
        x = np.sort(rng.uniform(-6, 6, 4096).astype(np.float32))
        q = quantize(x, st)
        assert np.all(np.diff(q) >= 0)

    def test_round_half_even(self):
        st = QuantStats(0.0, 255.0, 1.0, 0, UNSIGNED)
        x = np.array([0.5, 1.5, 2.5, 3.5], np.float32)
        np.testing.assert_array_equal(quantize(x, st), [0, 2, 2, 4])


class TestFakeQuantize:
    def test_grid_fixpoint_bit_exact(self, rng):
        st = compute_qparams(-2.0, 6.0, UNSIGNED)
        q = rng.integers(0, 256, size=128)
        x = dequantize(q, st).astype(np.float32)
        y = fake_quantize(Tensor(x), st)
        assert np.array_equal(y.data, x)

    def test_ste_gradient_inside_and_outside(self):
        st = compute_qparams(0.0, 4.0, UNSIGNED)
        x = Tensor(np.array([2.0, 5.0], np.float32), requires_grad=True)
        ops.sum_all(fake_quantize(x, st)).backward()
        np.testing.assert_array_equal(x.grad, [1.0, 0.0])

    def test_forward_equals_quant_dequant(self, rng):
        st = compute_qparams(-1.0, 2.0, UNSIGNED)
        x = rng.uniform(-2, 3, 256).astype(np.float32)
        y = fake_quantize(Tensor(x), st)
        np.testing.assert_allclose(
            y.data, dequantize(quantize(x, st), st).astype(np.float32),
            rtol=0, atol=1e-7)

    def test_gradient_survives_deep_stack(self, rng):
        # ten fake-quantized layers: clipped STE keeps gradients alive inside
        # the observed range, unlike hard clipping of the values themselves
        x = Tensor(rng.uniform(-1, 1, (4, 64)).astype(np.float32),
                   requires_grad=True)
        h = x
        st = compute_qparams(-1.5, 1.5, UNSIGNED)
        for _ in range(10):
            h = fake_quantize(h, st)
        ops.sum_all(h).backward()
        zero_fraction = float((np.abs(x.grad) < 1e-8).mean())
        assert zero_fraction == 0.0


class TestObserver:
    def test_first_batch_initializes(self):
        ob = Observer(mode="moving_average", averaging_constant=0.01)
        ob.observe(np.array([-1.0, 2.0], np.float32))
        assert ob.min_val == -1.0 and ob.max_val == 2.0

    def test_moving_average_update(self):
        ob = Observer(mode="moving_average", averaging_constant=0.1)
        ob.observe(np.array([-1.0, 2.0], np.float32))
        ob.observe(np.array([-3.0, 1.0], np.float32))
        assert ob.min_val == pytest.approx(0.9 * -1.0 + 0.1 * -3.0)
        assert ob.max_val == pytest.approx(0.9 * 2.0 + 0.1 * 1.0)

    def test_range_contains_zero(self):
        ob = Observer()
        ob.observe(np.array([5.0, 9.0], np.float32))
        assert ob.min_val <= 0.0 <= ob.max_val

    def test_absolute_mode(self):
        ob = Observer(mode="absolute")
        ob.observe(np.array([1.0], np.float32))
        ob.observe(np.array([-2.0], np.float32))
        ob.observe(np.array([0.5], np.float32))
        assert ob.min_val == -2.0 and ob.max_val == 1.0

    def test_unobserved_rejected(self):
        with pytest.raises(RuntimeError, match="not seen"):
            Observer().qparams()

    def test_bad_constant_rejected(self):
        with pytest.raises(ValueError):
            Observer(averaging_constant=0.0)


def test_weight_qparams_signed(rng):
    w = rng.standard_normal((8, 4, 3, 3)).astype(np.float32)
    st = weight_qparams(w)
    assert st.signedness == SIGNED
    assert st.min_val <= 0.0 <= st.max_val
    assert dequantize(np.array([st.zero_point]), st)[0] == 0.0
