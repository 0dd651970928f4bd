"""Raw numpy convolution/pooling kernels (no autodiff).

All kernels take and return plain ndarrays in NCHW layout. The autodiff
layer in ops.py wraps these with tape recording. Two convolution paths:

* grouped/regular convs run through im2col + batched GEMM,
* depthwise convs (groups == Cin, channel multiplier 1) run as k*k
  shifted fused-multiply-adds, which beats im2col for per-channel work.

Reductions keep numpy's deterministic pairwise order, so repeated runs
are bit-identical.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import _jit


class ShapeError(ValueError):
    """Dimension mismatch; message names the offending axis."""


def conv_out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _pad_hw(x, padding):
    if padding == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


def _windows(xp, k, stride, ho, wo):
    # view [N, C, Ho, Wo, k, k] into the padded input, no copy
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def im2col(x, k, stride, padding):
    """[N, C, H, W] -> [N, C*k*k, Ho*Wo] patch matrix (copies)."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(w, k, stride, padding)
    xp = _pad_hw(x, padding)
    win = _windows(xp, k, stride, ho, wo)                  # N,C,Ho,Wo,k,k
    cols = win.transpose(0, 1, 4, 5, 2, 3)                 # N,C,k,k,Ho,Wo
    return np.ascontiguousarray(cols).reshape(n, c * k * k, ho * wo), ho, wo


def col2im(cols, x_shape, k, stride, padding):
    """Scatter-add inverse of im2col: [N, C*k*k, Ho*Wo] -> [N, C, H, W]."""
    n, c, h, w = x_shape
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(w, k, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        he = i + stride * ho
        for j in range(k):
            we = j + stride * wo
            xp[:, :, i:he:stride, j:we:stride] += cols[:, :, i, j]
    if padding == 0:
        return xp
    return xp[:, :, padding:padding + h, padding:padding + w]


def _check_conv_args(x, w, stride, padding, groups):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d NCHW, got {x.ndim}-d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-d OIHW, got {w.ndim}-d")
    cin = x.shape[1]
    cout, cin_g, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernel must be square, got {kh}x{kw}")
    if kh % 2 != 1:
        raise ShapeError(f"conv2d kernel size must be odd, got {kh}")
    if cin % groups != 0:
        raise ShapeError(
            f"input channel axis ({cin}) not divisible by groups ({groups})")
    if cout % groups != 0:
        raise ShapeError(
            f"output channel axis ({cout}) not divisible by groups ({groups})")
    if cin_g != cin // groups:
        raise ShapeError(
            f"weight input-channel axis is {cin_g}, expected {cin // groups} "
            f"(Cin {cin} / groups {groups})")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride/padding ({stride}, {padding})")
    ho = conv_out_size(x.shape[2], kh, stride, padding)
    wo = conv_out_size(x.shape[3], kh, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh} larger than padded input {x.shape[2]}x{x.shape[3]} "
            f"(padding {padding})")
    return cout, kh, ho, wo


def conv2d_forward(x, w, bias=None, stride=1, padding=0, groups=1):
    """Grouped 2-d convolution. Returns (y, ctx) where ctx feeds backward."""
    cout, k, ho, wo = _check_conv_args(x, w, stride, padding, groups)
    n, cin = x.shape[:2]
    if groups == 1 and k == 1 and padding == 0:
        # pointwise: a pure reshape-GEMM, no patch matrix
        xs = x if stride == 1 else np.ascontiguousarray(x[:, :, ::stride, ::stride])
        xm = xs.reshape(n, cin, ho * wo)
        y = np.matmul(w.reshape(cout, cin), xm).reshape(n, cout, ho, wo)
        ctx = ("pw", x.shape, xm, k, stride, padding)
    elif groups == cin and w.shape[1] == 1 and cout == cin:
        xp = _pad_hw(x, padding)
        y = _depthwise_forward_padded(xp, w, stride, ho, wo)
        ctx = ("dw", x.shape, xp, k, stride, padding)
    elif groups == 1:
        cols, ho, wo = im2col(x, k, stride, padding)
        y = np.matmul(w.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
        ctx = ("gemm", x.shape, cols, k, stride, padding)
    else:
        y = np.empty((n, cout, ho, wo), dtype=x.dtype)
        cols_list = []
        cpg_i, cpg_o = cin // groups, cout // groups
        for g in range(groups):
            xg = x[:, g * cpg_i:(g + 1) * cpg_i]
            wg = w[g * cpg_o:(g + 1) * cpg_o]
            cols, _, _ = im2col(xg, k, stride, padding)
            y[:, g * cpg_o:(g + 1) * cpg_o] = np.matmul(
                wg.reshape(cpg_o, -1), cols).reshape(n, cpg_o, ho, wo)
            cols_list.append(cols)
        ctx = ("grouped", x.shape, cols_list, k, stride, padding)
    if bias is not None:
        y += bias.reshape(1, -1, 1, 1)
    return y, ctx


def _depthwise_forward_padded(xp, w, stride, ho, wo):
    n, c = xp.shape[:2]
    k = w.shape[2]
    if _jit.HAVE_NUMBA and xp.dtype == np.float32 and w.dtype == np.float32:
        return _jit.dw_forward(xp, w, stride, ho, wo)
    y = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    tmp = np.empty_like(y)
    for i in range(k):
        he = i + stride * ho
        for j in range(k):
            we = j + stride * wo
            np.multiply(xp[:, :, i:he:stride, j:we:stride],
                        w[:, 0, i, j].reshape(1, c, 1, 1), out=tmp)
            y += tmp
    return y


def conv2d_backward(dy, x, w, ctx, groups=1, need_dx=True):
    """Gradients of conv2d. Returns (dx or None, dw, db)."""
    kind, x_shape, saved, k, stride, padding = ctx
    n, cout = dy.shape[:2]
    db = np.einsum("nchw->c", dy, optimize=True)
    if kind == "pw":
        xm = saved
        cin = x_shape[1]
        dym = np.ascontiguousarray(dy).reshape(n, cout, -1)
        dw = _batched_outer(dym, xm).reshape(w.shape)
        dx = None
        if need_dx:
            dxm = np.matmul(w.reshape(cout, cin).T, dym)
            if stride == 1:
                dx = dxm.reshape(x_shape)
            else:
                dx = np.zeros(x_shape, dy.dtype)
                ho, wo = dy.shape[2:]
                dx[:, :, ::stride, ::stride] = dxm.reshape(n, cin, ho, wo)
        return dx, dw, db
    if kind == "dw":
        dx, dw = _depthwise_backward(dy, saved, w, stride, padding, x_shape,
                                     need_dx)
        return dx, dw, db
    if kind == "gemm":
        cols = saved
        dym = np.ascontiguousarray(dy).reshape(n, cout, -1)
        dw = _batched_outer(dym, cols).reshape(w.shape)
        dx = None
        if need_dx:
            dcols = np.matmul(w.reshape(cout, -1).T, dym)
            dx = col2im(dcols, x_shape, k, stride, padding)
        return dx, dw, db
    # grouped
    cin = x_shape[1]
    cpg_i, cpg_o = cin // groups, cout // groups
    dw = np.empty_like(w)
    dx = np.empty(x_shape, dtype=dy.dtype) if need_dx else None
    for g in range(groups):
        cols = saved[g]
        dyg = np.ascontiguousarray(dy[:, g * cpg_o:(g + 1) * cpg_o]).reshape(n, cpg_o, -1)
        dw[g * cpg_o:(g + 1) * cpg_o] = _batched_outer(dyg, cols).reshape(
            cpg_o, cpg_i, k, k)
        if need_dx:
            dcols = np.matmul(w[g * cpg_o:(g + 1) * cpg_o].reshape(cpg_o, -1).T, dyg)
            xg_shape = (n, cpg_i) + x_shape[2:]
            dx[:, g * cpg_i:(g + 1) * cpg_i] = col2im(dcols, xg_shape, k, stride, padding)
    return dx, dw, db


def _batched_outer(dym, xm):
    """sum_n dym[n] @ xm[n].T -> [O, I] via batched BLAS."""
    prods = np.matmul(dym, xm.transpose(0, 2, 1))
    return prods.sum(axis=0)


def _depthwise_backward(dy, xp, w, stride, padding, x_shape, need_dx):
    n, c, ho, wo = dy.shape
    k = w.shape[2]
    h, w_sp = x_shape[2:]
    if (_jit.HAVE_NUMBA and dy.dtype == np.float32 and w.dtype == np.float32
            and xp.dtype == np.float32):
        dy = np.ascontiguousarray(dy)
        dw = _jit.dw_backward_weight(dy, xp, k, stride)
        if not need_dx:
            return None, dw
        dxp = _jit.dw_backward_input(dy, w, stride, xp.shape[2], xp.shape[3])
        dx = (dxp if padding == 0
              else dxp[:, :, padding:padding + h, padding:padding + w_sp])
        return dx, dw
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    tmp = np.empty_like(dy) if need_dx else None
    for i in range(k):
        he = i + stride * ho
        for j in range(k):
            we = j + stride * wo
            sl = np.s_[:, :, i:he:stride, j:we:stride]
            dw[:, 0, i, j] = np.einsum("nchw,nchw->c", dy, xp[sl], optimize=True)
            if need_dx:
                np.multiply(dy, w[:, 0, i, j].reshape(1, c, 1, 1), out=tmp)
                dxp[sl] += tmp
    dx = None
    if need_dx:
        dx = (dxp if padding == 0
              else dxp[:, :, padding:padding + h, padding:padding + w_sp])
    return dx, dw


def maxpool2d_forward(x, k, stride):
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool kernel {k} larger than input {h}x{w}")
    ho = conv_out_size(h, k, stride, 0)
    wo = conv_out_size(w, k, stride, 0)
    win = _windows(x, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, (arg, ho, wo)


def maxpool2d_backward(dy, x_shape, k, stride, ctx):
    arg, ho, wo = ctx
    n, c = x_shape[:2]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    # scatter each output grad to the argmax position of its window
    ki, kj = np.divmod(arg, k)
    oi = np.arange(ho).reshape(1, 1, ho, 1) * stride
    oj = np.arange(wo).reshape(1, 1, 1, wo) * stride
    rows = (oi + ki).ravel()
    cols = (oj + kj).ravel()
    nn = np.repeat(np.arange(n), c * ho * wo)
    cc = np.tile(np.repeat(np.arange(c), ho * wo), n)
    np.add.at(dx, (nn, cc, rows, cols), dy.ravel())
    return dx
