"""Independent finite-difference gradient oracle.

Central differences with h=1e-3 at float64, compared against the tape's
analytic gradients. Deliberately knows nothing about how backward passes
are implemented: it only perturbs raw numpy buffers and re-runs forward.
"""

import numpy as np

from frostnet.tensor import Tensor, make_op


def numerical_grad(f, arrays, wrt, h=1e-3):
    """d f(arrays) / d arrays[wrt] by central differences (f returns a scalar)."""
    x = arrays[wrt]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(*arrays)
        flat[i] = orig - h
        fm = f(*arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def probe_loss(out, weights):
    """loss = sum(out * weights) as a recorded op, for seeding backward."""
    w = np.asarray(weights, dtype=out.data.dtype)

    def backward(g):
        out.accumulate_grad(g * w)

    return make_op(np.asarray((out.data * w).sum()), (out,), backward)


def check_op_gradients(op_fn, arrays, rel_tol=1e-4, h=1e-3, rng=None, wrt=None):
    """Compare analytic vs numerical gradients of a tensor op.

    ``op_fn(*tensors)`` must return an output Tensor; the scalar probe is a
    fixed random linear functional of the output so every output element
    contributes. Asserts the relative error stays below ``rel_tol`` for
    each checked input and returns the worst error seen.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    out_shape = op_fn(*[Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape) if out_shape else np.asarray(1.0)

    def scalar_f(*arrs):
        out = op_fn(*[Tensor(a) for a in arrs])
        return float((out.data * weights).sum())

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    probe_loss(op_fn(*tensors), weights).backward()

    worst = 0.0
    indices = wrt if wrt is not None else range(len(arrays))
    for i in indices:
        analytic = tensors[i].grad
        assert analytic is not None, f"no gradient reached input {i}"
        numeric = numerical_grad(scalar_f, [a.copy() for a in arrays], i, h=h)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
        err = np.abs(analytic - numeric).max() / scale
        worst = max(worst, err)
        assert err < rel_tol, f"gradient mismatch on input {i}: rel err {err:.3e}"
    return worst
