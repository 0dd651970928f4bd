"""Numba-compiled hot kernels (depthwise conv, batchnorm, fake-quant).

Stride-1 and stride-2 depthwise variants are separate functions so the
inner loops carry literal strides and auto-vectorize. fastmath stays off
everywhere: accumulation order is fixed, runs are bit-reproducible.
kernels.py and ops.py keep pure-numpy fallbacks for float64 oracles and
for environments without numba.
"""

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:            # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco if not (args and callable(args[0])) else args[0]


@njit(cache=True, fastmath=False)
def _dw_fwd_s1(xp, w, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[2]
    y = np.zeros((n, c, ho, wo), np.float32)
    for ni in range(n):
        for ci in range(c):
            xt = xp[ni, ci]
            yt = y[ni, ci]
            for i in range(k):
                for j in range(k):
                    wij = w[ci, 0, i, j]
                    for oi in range(ho):
                        xr = xt[oi + i]
                        yr = yt[oi]
                        for oj in range(wo):
                            yr[oj] += wij * xr[oj + j]
    return y


@njit(cache=True, fastmath=False)
def _dw_fwd_s2(xp, w, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[2]
    y = np.zeros((n, c, ho, wo), np.float32)
    for ni in range(n):
        for ci in range(c):
            xt = xp[ni, ci]
            yt = y[ni, ci]
            for i in range(k):
                for j in range(k):
                    wij = w[ci, 0, i, j]
                    for oi in range(ho):
                        xr = xt[oi * 2 + i]
                        yr = yt[oi]
                        for oj in range(wo):
                            yr[oj] += wij * xr[oj * 2 + j]
    return y


def dw_forward(xp, w, stride, ho, wo):
    if stride == 1:
        return _dw_fwd_s1(xp, w, ho, wo)
    if stride == 2:
        return _dw_fwd_s2(xp, w, ho, wo)
    raise ValueError("unsupported depthwise stride")


@njit(cache=True, fastmath=False)
def _dw_bwd_w_s1(dy, xp, k):
    n, c, ho, wo = dy.shape
    dw = np.zeros((c, 1, k, k), np.float32)
    for ni in range(n):
        for ci in range(c):
            xt = xp[ni, ci]
            gt = dy[ni, ci]
            for i in range(k):
                for j in range(k):
                    a0 = np.float32(0.0)
                    a1 = np.float32(0.0)
                    a2 = np.float32(0.0)
                    a3 = np.float32(0.0)
                    for oi in range(ho):
                        xr = xt[oi + i]
                        gr = gt[oi]
                        q = 0
                        while q + 4 <= wo:
                            a0 += gr[q] * xr[q + j]
                            a1 += gr[q + 1] * xr[q + 1 + j]
                            a2 += gr[q + 2] * xr[q + 2 + j]
                            a3 += gr[q + 3] * xr[q + 3 + j]
                            q += 4
                        while q < wo:
                            a0 += gr[q] * xr[q + j]
                            q += 1
                    dw[ci, 0, i, j] += (a0 + a1) + (a2 + a3)
    return dw


@njit(cache=True, fastmath=False)
def _dw_bwd_w_s2(dy, xp, k):
    n, c, ho, wo = dy.shape
    dw = np.zeros((c, 1, k, k), np.float32)
    for ni in range(n):
        for ci in range(c):
            xt = xp[ni, ci]
            gt = dy[ni, ci]
            for i in range(k):
                for j in range(k):
                    a0 = np.float32(0.0)
                    a1 = np.float32(0.0)
                    for oi in range(ho):
                        xr = xt[oi * 2 + i]
                        gr = gt[oi]
                        q = 0
                        while q + 2 <= wo:
                            a0 += gr[q] * xr[q * 2 + j]
                            a1 += gr[q + 1] * xr[q * 2 + 2 + j]
                            q += 2
                        while q < wo:
                            a0 += gr[q] * xr[q * 2 + j]
                            q += 1
                    dw[ci, 0, i, j] += a0 + a1
    return dw


@njit(cache=True, fastmath=False)
def _dw_bwd_x_s1(dy, w, hp, wp):
    n, c, ho, wo = dy.shape
    k = w.shape[2]
    dxp = np.zeros((n, c, hp, wp), np.float32)
    for ni in range(n):
        for ci in range(c):
            gt = dy[ni, ci]
            dxt = dxp[ni, ci]
            for i in range(k):
                for j in range(k):
                    wij = w[ci, 0, i, j]
                    for oi in range(ho):
                        gr = gt[oi]
                        dxr = dxt[oi + i]
                        for oj in range(wo):
                            dxr[oj + j] += wij * gr[oj]
    return dxp


@njit(cache=True, fastmath=False)
def _dw_bwd_x_s2(dy, w, hp, wp):
    n, c, ho, wo = dy.shape
    k = w.shape[2]
    dxp = np.zeros((n, c, hp, wp), np.float32)
    for ni in range(n):
        for ci in range(c):
            gt = dy[ni, ci]
            dxt = dxp[ni, ci]
            for i in range(k):
                for j in range(k):
                    wij = w[ci, 0, i, j]
                    for oi in range(ho):
                        gr = gt[oi]
                        dxr = dxt[oi * 2 + i]
                        for oj in range(wo):
                            dxr[oj * 2 + j] += wij * gr[oj]
    return dxp


def dw_backward_weight(dy, xp, k, stride):
    if stride == 1:
        return _dw_bwd_w_s1(dy, xp, k)
    if stride == 2:
        return _dw_bwd_w_s2(dy, xp, k)
    raise ValueError("unsupported depthwise stride")


def dw_backward_input(dy, w, stride, hp, wp):
    if stride == 1:
        return _dw_bwd_x_s1(dy, w, hp, wp)
    if stride == 2:
        return _dw_bwd_x_s2(dy, w, hp, wp)
    raise ValueError("unsupported depthwise stride")


@njit(cache=True, fastmath=False)
def fq_forward(x_flat, scale, zp, repr_min, repr_max):
    """Fused quantize-dequantize: rint(x/s)+zp clamped, back to reals."""
    out = np.empty_like(x_flat)
    for i in range(x_flat.size):
        q = np.rint(x_flat[i] / scale) + zp
        if q < repr_min:
            q = repr_min
        elif q > repr_max:
            q = repr_max
        out[i] = (q - zp) * scale
    return out


@njit(cache=True, fastmath=False)
def fq_backward(g_flat, x_flat, lo, hi):
    """Clipped straight-through: gradient passes only inside [lo, hi]."""
    out = np.empty_like(g_flat)
    for i in range(g_flat.size):
        xi = x_flat[i]
        out[i] = g_flat[i] if (xi >= lo and xi <= hi) else 0.0
    return out


@njit(cache=True, fastmath=False)
def relu_backward(g_flat, x_flat):
    out = np.empty_like(g_flat)
    for i in range(g_flat.size):
        out[i] = g_flat[i] if x_flat[i] > 0.0 else 0.0
    return out


@njit(cache=True, fastmath=False)
def mul_cvec(x3, v):
    """x3 [N, C, P] scaled per channel by v [C]."""
    n, c, p = x3.shape
    y = np.empty_like(x3)
    for ni in range(n):
        for ci in range(c):
            a = v[ci]
            xr = x3[ni, ci]
            yr = y[ni, ci]
            for i in range(p):
                yr[i] = xr[i] * a
    return y


@njit(cache=True, fastmath=False)
def bn_stats(x3):
    """Per-channel sum and sum-of-squares over [N, C, P]."""
    n, c, p = x3.shape
    s1 = np.zeros(c, np.float64)
    s2 = np.zeros(c, np.float64)
    for ni in range(n):
        for ci in range(c):
            row = x3[ni, ci]
            a1 = np.float64(0.0)
            a2 = np.float64(0.0)
            for i in range(p):
                v = np.float64(row[i])
                a1 += v
                a2 += v * v
            s1[ci] += a1
            s2[ci] += a2
    return s1, s2


@njit(cache=True, fastmath=False)
def bn_normalize(x3, mean, scale, shift):
    """y = (x - mean_c) * scale_c + shift_c over [N, C, P]."""
    n, c, p = x3.shape
    y = np.empty_like(x3)
    for ni in range(n):
        for ci in range(c):
            m = mean[ci]
            a = scale[ci]
            b = shift[ci]
            xr = x3[ni, ci]
            yr = y[ni, ci]
            for i in range(p):
                yr[i] = (xr[i] - m) * a + b
    return y


@njit(cache=True, fastmath=False)
def bn_backward_reduce(g3, x3, mean, inv_std):
    """Per-channel sum(g) and sum(g * xhat), recomputing xhat from x."""
    n, c, p = g3.shape
    sg = np.zeros(c, np.float64)
    sgx = np.zeros(c, np.float64)
    for ni in range(n):
        for ci in range(c):
            m = mean[ci]
            inv = inv_std[ci]
            gr = g3[ni, ci]
            xr = x3[ni, ci]
            a1 = np.float64(0.0)
            a2 = np.float64(0.0)
            for i in range(p):
                gi = np.float64(gr[i])
                a1 += gi
                a2 += gi * np.float64((xr[i] - m) * inv)
            sg[ci] += a1
            sgx[ci] += a2
    return sg, sgx


@njit(cache=True, fastmath=False)
def bn_backward_dx(g3, x3, mean, inv_std, gamma, m1, m2):
    """dx = (g*gamma - m1 - xhat*m2) * inv_std, fused over [N, C, P]."""
    n, c, p = g3.shape
    dx = np.empty_like(g3)
    for ni in range(n):
        for ci in range(c):
            m = mean[ci]
            inv = inv_std[ci]
            gg = gamma[ci]
            c1 = m1[ci]
            c2 = m2[ci]
            gr = g3[ni, ci]
            xr = x3[ni, ci]
            dr = dx[ni, ci]
            for i in range(p):
                xhat = (xr[i] - m) * inv
                dr[i] = (gr[i] * gg - c1 - xhat * c2) * inv
    return dx


@njit(cache=True, fastmath=False)
def bn_backward_dx_eval(g3, gamma_inv):
    n, c, p = g3.shape
    dx = np.empty_like(g3)
    for ni in range(n):
        for ci in range(c):
            a = gamma_inv[ci]
            gr = g3[ni, ci]
            dr = dx[ni, ci]
            for i in range(p):
                dr[i] = gr[i] * a
    return dx


@njit(cache=True, fastmath=False)
def center_u8(x_flat, zp):
    """uint8 grid values -> zero-point-centered float32 (one pass)."""
    out = np.empty(x_flat.size, np.float32)
    for i in range(x_flat.size):
        out[i] = np.float32(np.int32(x_flat[i]) - zp)
    return out


@njit(cache=True, fastmath=False)
def requant(acc3, bias_q, mult, zp, lo, hi):
    """Integer accumulator [N,C,P] (+per-channel bias) -> uint8 grid.

    Scalar math runs in float64 so the bias add and multiplier stay exact
    regardless of the accumulator dtype.
    """
    n, c, p = acc3.shape
    out = np.empty((n, c, p), np.uint8)
    for ni in range(n):
        for ci in range(c):
            b = bias_q[ci]
            ar = acc3[ni, ci]
            orow = out[ni, ci]
            for i in range(p):
                q = np.rint((np.float64(ar[i]) + b) * mult) + zp
                if q < lo:
                    q = lo
                elif q > hi:
                    q = hi
                orow[i] = np.uint8(q)
    return out


@njit(cache=True, fastmath=False)
def int_add_u8(a_flat, b_flat, ma, mb, zpa, zpb, zpo, lo, hi):
    """Requantized residual add on uint8 grids, one pass."""
    out = np.empty(a_flat.size, np.uint8)
    for i in range(a_flat.size):
        acc = (ma * (np.float64(a_flat[i]) - zpa)
               + mb * (np.float64(b_flat[i]) - zpb))
        q = np.rint(acc) + zpo
        if q < lo:
            q = lo
        elif q > hi:
            q = hi
        out[i] = np.uint8(q)
    return out


@njit(cache=True, fastmath=False)
def channel_mul_u8(x3, g2, m, zpx, zpg, zpo, lo, hi):
    """Gating multiply on uint8 grids: x [N,C,P] * gate [N,C] -> uint8."""
    n, c, p = x3.shape
    out = np.empty((n, c, p), np.uint8)
    for ni in range(n):
        for ci in range(c):
            gv = m * (np.float64(g2[ni, ci]) - zpg)
            xr = x3[ni, ci]
            orow = out[ni, ci]
            for i in range(p):
                q = np.rint(gv * (np.float64(xr[i]) - zpx)) + zpo
                if q < lo:
                    q = lo
                elif q > hi:
                    q = hi
                orow[i] = np.uint8(q)
    return out


@njit(cache=True, fastmath=False)
def rescale_u8(q_flat, m, zpi, zpo, lo, hi):
    """Move uint8 values from one affine grid to another, one pass."""
    out = np.empty(q_flat.size, np.uint8)
    for i in range(q_flat.size):
        q = np.rint(m * (np.float64(q_flat[i]) - zpi)) + zpo
        if q < lo:
            q = lo
        elif q > hi:
            q = hi
        out[i] = np.uint8(q)
    return out


def warmup():
    """Trigger JIT compilation of every kernel on tiny inputs."""
    if not HAVE_NUMBA:
        return
    xp = np.zeros((1, 1, 6, 6), np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    for s, hw in ((1, 4), (2, 2)):
        y = dw_forward(xp, w, s, hw, hw)
        dw_backward_weight(y, xp, 3, s)
        dw_backward_input(y, w, s, 6, 6)
    flat = np.zeros(4, np.float32)
    fq_forward(flat, np.float32(1.0), 0, 0, 255)
    fq_backward(flat, flat, np.float32(0.0), np.float32(1.0))
    relu_backward(flat, flat)
    center_u8(np.zeros(4, np.uint8), 0)
    u8 = np.zeros(4, np.uint8)
    int_add_u8(u8, u8, 1.0, 1.0, 0, 0, 0, 0, 255)
    rescale_u8(u8, 1.0, 0, 0, 0, 255)
    f64 = np.zeros(1, np.float64)
    requant(np.zeros((1, 1, 4), np.float32), f64, 1.0, 0, 0, 255)
    requant(np.zeros((1, 1, 4), np.float64), f64, 1.0, 0, 0, 255)
    x3 = np.zeros((1, 1, 4), np.float32)
    f32 = np.zeros(1, np.float32)
    mul_cvec(x3, f32)
    bn_stats(x3)
    bn_normalize(x3, f32, f32, f32)
    bn_backward_reduce(x3, x3, f32, f32)
    bn_backward_dx(x3, x3, f32, f32, f32, f32, f32)
    bn_backward_dx_eval(x3, f32)
