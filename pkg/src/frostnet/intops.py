"""True integer-arithmetic inference kernels.

Products of centered 8-bit values never exceed 255^2, so partial sums over
<=256-element chunks stay below 2^24 and are exact in float32. GEMMs
therefore run as chunked float32 BLAS calls accumulated in float64, which
is bit-equivalent to int32 accumulation (and range-checked against it)
while keeping single-precision GEMM throughput. Requantization applies
the double-precision multiplier M = s_in*s_w/s_out with round-half-even.
"""

import numpy as np

from . import kernels, _jit
from .quant import QuantStats, quantize

_CHUNK = 256          # 256 * 255^2 < 2^24: exact in float32
_INT32_MAX = 2 ** 31 - 1


def chunked_int_gemm(w32, cols32, chunk=_CHUNK):
    """Exact integer GEMM via chunked f32 BLAS: [O,K] @ [N,K,P].

    Within one chunk every partial product sum stays below 2^24 (the
    caller sizes the chunk from the actual centered-value bounds), so
    float32 accumulation is exact; longer reductions accumulate the
    per-chunk results in float64.
    """
    k = w32.shape[1]
    if k <= chunk:
        return np.matmul(w32, cols32)
    acc = np.zeros((cols32.shape[0], w32.shape[0], cols32.shape[2]), np.float64)
    for k0 in range(0, k, chunk):
        k1 = min(k0 + chunk, k)
        acc += np.matmul(w32[:, k0:k1], cols32[:, k0:k1, :])
    return acc


def _act_clamp_bounds(stats, activation):
    lo, hi = stats.repr_min, stats.repr_max
    if activation in ("relu", "relu6"):
        lo = max(lo, stats.zero_point)
    if activation == "relu6":
        hi = min(hi, stats.zero_point + int(np.rint(6.0 / stats.scale)))
    return lo, hi


def requantize(acc, multiplier, out_stats, activation="none"):
    """f64 integer accumulator -> uint8 output grid with optional act clamp."""
    y = np.rint(acc * multiplier) + out_stats.zero_point
    lo, hi = _act_clamp_bounds(out_stats, activation)
    np.clip(y, lo, hi, out=y)
    return y.astype(np.uint8)


class QuantizedConv:
    """One fused Conv-BN(-act) pattern executing on the integer grid.

    Built once at conversion time from folded float parameters; holds the
    centered integer weights, the per-channel zero-point correction, the
    integer bias, and the requantization multiplier.
    """

    def __init__(self, fused, in_stats, w_stats, out_stats):
        if out_stats is None:
            raise ValueError(
                "integer path needs calibrated output statistics; out_stats missing")
        self.stride = fused.stride
        self.padding = fused.padding
        self.groups = fused.groups
        self.activation = fused.activation
        self.in_stats = in_stats
        self.w_stats = w_stats
        self.out_stats = out_stats
        w_q = quantize(fused.weight, w_stats)
        self.w_centered = (w_q - w_stats.zero_point).astype(np.float32)
        self.kernel = fused.weight.shape[2]
        self.cout = fused.weight.shape[0]
        acc_scale = in_stats.scale * w_stats.scale
        self.bias_q = np.rint(np.asarray(fused.bias, np.float64) / acc_scale)
        self.multiplier = acc_scale / out_stats.scale
        self._depthwise = (self.groups == self.cout and fused.weight.shape[1] == 1)
        # static accumulator bound: K products of centered 8-bit values
        k_red = fused.weight[0].size
        w_peak = float(np.abs(self.w_centered).max()) or 1.0
        x_peak = float(max(in_stats.zero_point - in_stats.repr_min,
                           in_stats.repr_max - in_stats.zero_point)) or 1.0
        bound = k_red * w_peak * x_peak + np.abs(self.bias_q).max(initial=0.0)
        if bound > _INT32_MAX:
            raise OverflowError(
                f"fused pattern reduction of {k_red} taps can overflow int32")
        # the widest f32-exact chunk for this layer's actual value ranges
        self.chunk = max(1, int(2 ** 24 / (w_peak * x_peak)))

    def __call__(self, x_q):
        if self._depthwise:
            acc = self._depthwise_acc(x_q)
        else:
            acc = self._gemm_acc(x_q)
        n = acc.shape[0]
        lo, hi = _act_clamp_bounds(self.out_stats, self.activation)
        if _jit.HAVE_NUMBA:
            out = _jit.requant(acc.reshape(n, self.cout, -1), self.bias_q,
                               self.multiplier, self.out_stats.zero_point,
                               lo, hi)
            return out.reshape(acc.shape)
        acc = acc.astype(np.float64) + self.bias_q.reshape(1, -1, 1, 1)
        y = np.rint(acc * self.multiplier) + self.out_stats.zero_point
        np.clip(y, lo, hi, out=y)
        return y.astype(np.uint8)

    def _center(self, x_q):
        # centering first makes zero padding equal the real-domain zero
        if _jit.HAVE_NUMBA:
            flat = np.ascontiguousarray(x_q).reshape(-1)
            return _jit.center_u8(flat, self.in_stats.zero_point).reshape(x_q.shape)
        x32 = x_q.astype(np.float32)
        x32 -= np.float32(self.in_stats.zero_point)
        return x32

    def _gemm_acc(self, x_q):
        n, cin = x_q.shape[:2]
        x32 = self._center(x_q)
        if self.groups == 1 and self.kernel == 1 and self.padding == 0:
            # pointwise: reshape straight into the GEMM, no patch matrix
            s = self.stride
            xs = x32 if s == 1 else np.ascontiguousarray(x32[:, :, ::s, ::s])
            ho, wo = xs.shape[2:]
            cols = xs.reshape(n, cin, ho * wo)
            acc = chunked_int_gemm(self.w_centered.reshape(self.cout, -1),
                                   cols, self.chunk)
        elif self.groups == 1:
            cols, ho, wo = kernels.im2col(x32, self.kernel, self.stride, self.padding)
            acc = chunked_int_gemm(self.w_centered.reshape(self.cout, -1),
                                   cols, self.chunk)
        else:
            cpg_i, cpg_o = cin // self.groups, self.cout // self.groups
            parts = []
            for g in range(self.groups):
                cols, ho, wo = kernels.im2col(
                    x32[:, g * cpg_i:(g + 1) * cpg_i], self.kernel,
                    self.stride, self.padding)
                wg = self.w_centered[g * cpg_o:(g + 1) * cpg_o].reshape(cpg_o, -1)
                parts.append(chunked_int_gemm(wg, cols, self.chunk))
            acc = np.concatenate(parts, axis=1)
        return acc.reshape(n, self.cout, ho, wo)

    def _depthwise_acc(self, x_q):
        # k*k products per output: sums stay below 2^24, f32 is exact
        xc = self._center(x_q)
        y, _ = kernels.conv2d_forward(xc, self.w_centered, None,
                                      self.stride, self.padding, self.groups)
        return y


def _check_int32_range(acc):
    peak = np.abs(acc).max() if acc.size else 0.0
    if peak > _INT32_MAX:
        raise OverflowError(
            f"integer accumulator peak {peak:.3e} exceeds int32 range")


def int_conv2d(x_q, fused, in_stats, w_stats, out_stats):
    """Single-shot integer convolution of a fused pattern (see QuantizedConv)."""
    return QuantizedConv(fused, in_stats, w_stats, out_stats)(x_q)


def int_add(a_q, a_stats, b_q, b_stats, out_stats):
    """Residual add on the integer grid: rescale both terms to the output."""
    ma = a_stats.scale / out_stats.scale
    mb = b_stats.scale / out_stats.scale
    if _jit.HAVE_NUMBA:
        out = _jit.int_add_u8(np.ascontiguousarray(a_q).reshape(-1),
                              np.ascontiguousarray(b_q).reshape(-1),
                              ma, mb, a_stats.zero_point, b_stats.zero_point,
                              out_stats.zero_point, out_stats.repr_min,
                              out_stats.repr_max)
        return out.reshape(a_q.shape)
    acc = ma * (a_q.astype(np.float64) - a_stats.zero_point) \
        + mb * (b_q.astype(np.float64) - b_stats.zero_point)
    y = np.rint(acc) + out_stats.zero_point
    np.clip(y, out_stats.repr_min, out_stats.repr_max, out=y)
    return y.astype(np.uint8)


def _rescale(q, st, out_stats):
    m = st.scale / out_stats.scale
    if _jit.HAVE_NUMBA:
        out = _jit.rescale_u8(np.ascontiguousarray(q).reshape(-1), m,
                              st.zero_point, out_stats.zero_point,
                              out_stats.repr_min, out_stats.repr_max)
        return out.reshape(q.shape)
    y = np.rint(m * (q.astype(np.float64) - st.zero_point)) + out_stats.zero_point
    np.clip(y, out_stats.repr_min, out_stats.repr_max, out=y)
    return y.astype(np.uint8)


def int_concat(parts, part_stats, out_stats):
    """Channel concat with per-input requantization onto the shared grid."""
    outs = []
    for q, st in zip(parts, part_stats):
        if st.scale == out_stats.scale and st.zero_point == out_stats.zero_point:
            outs.append(q)
        else:
            outs.append(_rescale(q, st, out_stats))
    return np.concatenate(outs, axis=1)


def int_global_avgpool(x_q, in_stats, out_stats=None):
    """Spatial mean on the grid; reuses the input grid when out_stats is None."""
    st = in_stats if out_stats is None else out_stats
    acc = (x_q.astype(np.float64) - in_stats.zero_point).mean(axis=(2, 3),
                                                              keepdims=True)
    y = np.rint(acc * (in_stats.scale / st.scale)) + st.zero_point
    np.clip(y, st.repr_min, st.repr_max, out=y)
    return y.astype(np.uint8)


def int_maxpool(x_q, k, stride):
    y, _ = kernels.maxpool2d_forward(x_q, k, stride)
    return y


def hard_sigmoid_lut(in_stats, out_stats):
    """256-entry uint8 lookup table computing hard-sigmoid on the grid."""
    q = np.arange(256, dtype=np.float64)
    x = (q - in_stats.zero_point) * in_stats.scale
    y = np.minimum(np.maximum(x + 3.0, 0.0), 6.0) / 6.0
    t = np.rint(y / out_stats.scale) + out_stats.zero_point
    return np.clip(t, out_stats.repr_min, out_stats.repr_max).astype(np.uint8)


def int_channel_multiply(x_q, x_stats, g_q, g_stats, out_stats):
    """SE gating on the grid: requantized integer product."""
    m = (x_stats.scale * g_stats.scale) / out_stats.scale
    if _jit.HAVE_NUMBA:
        n, c, h, w = x_q.shape
        out = _jit.channel_mul_u8(
            np.ascontiguousarray(x_q).reshape(n, c, h * w),
            np.ascontiguousarray(g_q).reshape(n, c), m,
            x_stats.zero_point, g_stats.zero_point, out_stats.zero_point,
            out_stats.repr_min, out_stats.repr_max)
        return out.reshape(x_q.shape)
    acc = (x_q.astype(np.float64) - x_stats.zero_point) \
        * (g_q.astype(np.float64) - g_stats.zero_point)
    y = np.rint(acc * m) + out_stats.zero_point
    np.clip(y, out_stats.repr_min, out_stats.repr_max, out=y)
    return y.astype(np.uint8)
