"""Autodiff operators covering the FrostNet operator set.

Each function runs the forward kernel, then records a backward closure on
the tape via ``make_op``. Backward formulas follow the usual chain-rule
derivations; convolution/pool heavy lifting lives in kernels.py.
"""

import numpy as np

from . import kernels, _jit
from .kernels import ShapeError
from .tensor import Tensor, make_op, check_finite_grad

__all__ = ["conv2d", "batchnorm2d", "relu", "relu6", "activation",
           "maxpool2d", "global_avgpool", "concat_channels", "add",
           "linear", "softmax_cross_entropy", "mul_channelwise",
           "channel_multiply", "hard_sigmoid", "flatten2d", "sum_all"]


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def conv2d(x, w, bias=None, stride=1, padding=0, groups=1):
    """Grouped NCHW convolution: regular (groups=1), depthwise
    (groups=Cin), and pointwise (k=1) forms."""
    x, w = _as_tensor(x), _as_tensor(w)
    b_data = None if bias is None else bias.data
    y, ctx = kernels.conv2d_forward(x.data, w.data, b_data, stride, padding, groups)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g = check_finite_grad(g)
        dx, dw, db = kernels.conv2d_backward(
            g, x.data, w.data, ctx, groups, need_dx=x.requires_grad)
        if x.requires_grad:
            x.accumulate_grad(dx)
        if w.requires_grad:
            w.accumulate_grad(dw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(db)

    return make_op(y, parents, backward)


def batchnorm2d(x, gamma, beta, running_mean, running_var, eps=1e-5,
                training=False, momentum=0.1, running_scale=None):
    """Per-channel batch normalization with affine.

    Training mode normalizes by batch statistics and updates the running
    buffers in place (biased variance for normalization, unbiased for the
    running update). Eval mode normalizes by the running statistics.
    ``running_scale`` rescales the recorded running statistics per channel
    (mean by the factor, variance by its square); fused QAT convs use it
    to keep running stats in the unfolded-weight domain.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d input must be 4-d NCHW, got {x.data.ndim}-d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm affine params must have shape ({c},)")
    if eps <= 0:
        raise ValueError("batchnorm eps must be positive")
    n_red = x.shape[0] * x.shape[2] * x.shape[3]
    if training and n_red == 0:
        raise ValueError("batchnorm2d training mode requires a non-empty batch")

    dt = x.data.dtype
    use_jit = _jit.HAVE_NUMBA and dt == np.float32
    n, _, h, w = x.shape
    x3 = np.ascontiguousarray(x.data).reshape(n, c, h * w) if use_jit else None

    if training:
        # single data pass for both moments
        if use_jit:
            s1, s2 = _jit.bn_stats(x3)
        else:
            s1 = np.einsum("nchw->c", x.data, optimize=True)
            s2 = np.einsum("nchw,nchw->c", x.data, x.data, optimize=True)
        mean = s1 / n_red
        var = np.maximum(s2 / n_red - mean * mean, 0.0)
        unbiased = var * (n_red / max(n_red - 1, 1))
        r_mean, r_var = mean, unbiased
        if running_scale is not None:
            r_mean = mean * running_scale
            r_var = unbiased * (running_scale * running_scale)
        running_mean.data *= (1.0 - momentum)
        running_mean.data += momentum * r_mean.astype(running_mean.data.dtype)
        running_var.data *= (1.0 - momentum)
        running_var.data += momentum * r_var.astype(running_var.data.dtype)
    else:
        mean = running_mean.data
        var = running_var.data

    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    mean32 = mean.astype(dt)
    cshape = (1, c, 1, 1)
    if use_jit:
        scale = gamma.data * inv_std
        y = _jit.bn_normalize(x3, mean32, scale, beta.data).reshape(x.shape)
        xhat = None
    else:
        xhat = x.data - mean32.reshape(cshape)
        xhat *= inv_std.reshape(cshape)
        y = xhat * gamma.data.reshape(cshape)
        y += beta.data.reshape(cshape)

    def backward(g):
        g = check_finite_grad(g)
        if use_jit:
            g3 = np.ascontiguousarray(g).reshape(n, c, h * w)
            sg, sgx = _jit.bn_backward_reduce(g3, x3, mean32, inv_std)
            if gamma.requires_grad:
                gamma.accumulate_grad(sgx.astype(dt))
            if beta.requires_grad:
                beta.accumulate_grad(sg.astype(dt))
            if not x.requires_grad:
                return
            if training:
                m1 = (gamma.data * sg.astype(dt)) / n_red
                m2 = (gamma.data * sgx.astype(dt)) / n_red
                dx = _jit.bn_backward_dx(g3, x3, mean32, inv_std, gamma.data,
                                         m1, m2)
            else:
                dx = _jit.bn_backward_dx_eval(g3, gamma.data * inv_std)
            x.accumulate_grad(dx.reshape(x.shape))
            return
        if gamma.requires_grad:
            gamma.accumulate_grad(np.einsum("nchw,nchw->c", g, xhat, optimize=True))
        if beta.requires_grad:
            beta.accumulate_grad(np.einsum("nchw->c", g, optimize=True))
        if not x.requires_grad:
            return
        gg = gamma.data.reshape(cshape)
        if training:
            # d/dx of batch-stat normalization
            gxh = g * gg
            m1 = np.einsum("nchw->c", gxh, optimize=True) / n_red
            m2 = np.einsum("nchw,nchw->c", gxh, xhat, optimize=True) / n_red
            dx = xhat * m2.astype(dt).reshape(cshape)
            dx += m1.astype(dt).reshape(cshape)
            np.subtract(gxh, dx, out=dx)
            dx *= inv_std.reshape(cshape)
        else:
            dx = g * (gg * inv_std.reshape(cshape))
        x.accumulate_grad(dx)

    return make_op(y, (x, gamma, beta), backward)


def relu(x):
    x = _as_tensor(x)
    y = np.maximum(x.data, 0)

    def backward(g):
        g = check_finite_grad(g)
        if not x.requires_grad:
            return
        if _jit.HAVE_NUMBA and g.dtype == np.float32 and x.data.dtype == np.float32:
            gflat = np.ascontiguousarray(g).reshape(-1)
            xflat = np.ascontiguousarray(x.data).reshape(-1)
            x.accumulate_grad(_jit.relu_backward(gflat, xflat).reshape(x.shape))
        else:
            x.accumulate_grad(g * (x.data > 0))

    return make_op(y, (x,), backward)


def relu6(x):
    x = _as_tensor(x)
    y = np.minimum(np.maximum(x.data, 0), 6)

    def backward(g):
        if x.requires_grad:
            mask = (x.data > 0) & (x.data < 6)
            x.accumulate_grad(check_finite_grad(g) * mask)

    return make_op(y, (x,), backward)


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "relu6":
        return relu6(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def hard_sigmoid(x):
    """relu6(x + 3) / 6 — the gate non-linearity of SE blocks."""
    x = _as_tensor(x)
    y = np.minimum(np.maximum(x.data + 3.0, 0), 6) / 6.0

    def backward(g):
        if x.requires_grad:
            mask = (x.data > -3.0) & (x.data < 3.0)
            x.accumulate_grad(check_finite_grad(g) * mask / 6.0)

    return make_op(y, (x,), backward)


def maxpool2d(x, k, stride=None):
    x = _as_tensor(x)
    stride = k if stride is None else stride
    y, ctx = kernels.maxpool2d_forward(x.data, k, stride)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(
                kernels.maxpool2d_backward(check_finite_grad(g), x.shape, k, stride, ctx))

    return make_op(y, (x,), backward)


def global_avgpool(x):
    """[N, C, H, W] -> [N, C, 1, 1] spatial mean."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(
                np.broadcast_to(check_finite_grad(g) / (h * w), x.shape).copy())

    return make_op(y, (x,), backward)


def concat_channels(inputs):
    """Stack along the channel axis; input 0 occupies the lowest indices."""
    inputs = [_as_tensor(t) for t in inputs]
    base = inputs[0].shape
    for i, t in enumerate(inputs[1:], 1):
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(
                f"concat input {i} has non-channel dims {t.shape}, expected to "
                f"match {base} outside axis 1")
    y = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([t.shape[1] for t in inputs])[:-1]

    def backward(g):
        g = check_finite_grad(g)
        for t, piece in zip(inputs, np.split(g, bounds, axis=1)):
            if t.requires_grad:
                t.accumulate_grad(piece)

    return make_op(y, tuple(inputs), backward)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add requires identical shapes, got {a.shape} vs {b.shape}")
    y = a.data + b.data

    def backward(g):
        g = check_finite_grad(g)
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return make_op(y, (a, b), backward)


def channel_multiply(x, gate):
    """Elementwise x * gate with gate shaped [N, C, 1, 1] (SE gating)."""
    x, gate = _as_tensor(x), _as_tensor(gate)
    n, c = x.shape[:2]
    if gate.shape != (n, c, 1, 1):
        raise ShapeError(
            f"channel gate must have shape ({n}, {c}, 1, 1), got {gate.shape}")
    y = x.data * gate.data

    def backward(g):
        g = check_finite_grad(g)
        if x.requires_grad:
            x.accumulate_grad(g * gate.data)
        if gate.requires_grad:
            gate.accumulate_grad((g * x.data).sum(axis=(2, 3), keepdims=True))

    return make_op(y, (x, gate), backward)


def mul_channelwise(x, vec, axis):
    """Multiply by a constant per-channel vector along ``axis`` (no gradient
    to the vector; used for detached batchnorm fold factors)."""
    x = _as_tensor(x)
    vec = np.asarray(vec, dtype=x.data.dtype)
    shape = [1] * x.data.ndim
    shape[axis] = vec.size
    v = vec.reshape(shape)

    def _scale(arr):
        if (_jit.HAVE_NUMBA and arr.dtype == np.float32 and arr.ndim == 4
                and axis == 1):
            n, c, h, w = arr.shape
            a3 = np.ascontiguousarray(arr).reshape(n, c, h * w)
            return _jit.mul_cvec(a3, vec).reshape(arr.shape)
        return arr * v

    y = _scale(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(_scale(check_finite_grad(g)))

    return make_op(y, (x,), backward)


def mul_sign(x, signs):
    """x * sign-vector (constant +-1/0), gradient carries the signs."""
    x = _as_tensor(x)
    s = np.asarray(signs, dtype=x.data.dtype)
    y = x.data * s

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(check_finite_grad(g) * s)

    return make_op(y, (x,), backward)


def add_channelwise(x, vec):
    """Add a constant per-channel vector along axis 1 of an NCHW tensor."""
    x = _as_tensor(x)
    v = np.asarray(vec, dtype=x.data.dtype).reshape(1, -1, 1, 1)
    y = x.data + v

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(check_finite_grad(g))

    return make_op(y, (x,), backward)


def sum_all(x):
    """Reduce every element to a scalar (test/loss plumbing)."""
    x = _as_tensor(x)
    y = x.data.sum()

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full(x.shape, g, dtype=x.data.dtype))

    return make_op(np.asarray(y), (x,), backward)


def flatten2d(x):
    """[N, C, 1, 1] or [N, C, H, W] -> [N, C*H*W]."""
    x = _as_tensor(x)
    n = x.shape[0]
    y = x.data.reshape(n, -1)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(check_finite_grad(g).reshape(x.shape))

    return make_op(y, (x,), backward)


def linear(x, w, bias=None):
    """x [N, F] @ w.T [F, O] (+ bias)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("linear expects 2-d input and weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"linear feature axis mismatch: input {x.shape[1]} vs weight {w.shape[1]}")
    y = x.data @ w.data.T
    if bias is not None:
        y = y + bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g = check_finite_grad(g)
        if x.requires_grad:
            x.accumulate_grad(g @ w.data)
        if w.requires_grad:
            w.accumulate_grad(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return make_op(y, parents, backward)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; labels are integer class ids."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects [N, k] logits")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = (z - zmax) - np.log(sez)
    loss = -log_probs[np.arange(n), labels].mean()

    def backward(g):
        if logits.requires_grad:
            probs = ez / sez
            probs[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(probs * (check_finite_grad(g) / n))

    return make_op(np.asarray(loss, dtype=z.dtype), (logits,), backward)
