"""Affine INT8 quantization: statistics, observers, fake-quantization.

Real values map to 8-bit integers through q = round(x/scale) + zero_point
with round-half-to-even everywhere; zero is always exactly representable.
Weights quantize signed per-tensor, activations unsigned per-tensor.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _jit
from .tensor import Tensor, make_op

SIGNED = "signed"
UNSIGNED = "unsigned"

_REPR = {SIGNED: (-128, 127), UNSIGNED: (0, 255)}


@dataclass(frozen=True)
class QuantStats:
    """The (min, max, scale, zero-point) bundle defining one affine grid."""

    min_val: float
    max_val: float
    scale: float
    zero_point: int
    signedness: str = UNSIGNED
    bit_width: int = 8

    @property
    def repr_min(self):
        return _REPR[self.signedness][0]

    @property
    def repr_max(self):
        return _REPR[self.signedness][1]

    def as_record(self):
        return {"min": self.min_val, "max": self.max_val,
                "scale": self.scale, "zero_point": self.zero_point,
                "signedness": self.signedness}


def compute_qparams(min_val, max_val, signedness=UNSIGNED):
    """Derive scale/zero-point from an observed range.

    The range is minimally expanded to contain zero; a degenerate range
    (max == min, i.e. all-zero observations) falls back to scale 1 so the
    grid stays usable.
    """
    if math.isnan(min_val) or math.isnan(max_val):
        raise ValueError("NaN bounds passed to compute_qparams")
    if max_val < min_val:
        raise ValueError(f"max_val {max_val} < min_val {min_val}")
    lo, hi = min(float(min_val), 0.0), max(float(max_val), 0.0)
    repr_min, repr_max = _REPR[signedness]
    levels = 2 ** 8 - 1
    if hi == lo:
        return QuantStats(lo, hi, 1.0, 0, signedness)
    scale = (hi - lo) / levels
    zp = int(np.rint(repr_min - lo / scale))
    zp = min(max(zp, repr_min), repr_max)
    return QuantStats(lo, hi, scale, zp, signedness)


def quantize(x, stats):
    """Real values -> integer grid, saturating at the representable range."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    q = np.rint(data / stats.scale) + stats.zero_point
    return np.clip(q, stats.repr_min, stats.repr_max).astype(np.int32)


def dequantize(q, stats):
    """Integer grid -> real values; dequantize(zero_point) is exactly 0."""
    q = np.asarray(q)
    return ((q - stats.zero_point) * np.asarray(stats.scale,
            dtype=np.float64 if q.dtype == np.float64 else np.float32))


def fake_quantize(x, stats):
    """quantize-then-dequantize with a clipped straight-through backward.

    Forward mimics the integer grid in floating point; backward passes the
    incoming gradient unchanged where min_val <= x <= max_val and zero
    outside the observed range.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    dt = x.data.dtype
    use_jit = _jit.HAVE_NUMBA and dt == np.float32
    sc = np.asarray(stats.scale, dtype=dt)
    if use_jit:
        flat = np.ascontiguousarray(x.data).reshape(-1)
        y = _jit.fq_forward(flat, np.float32(stats.scale), stats.zero_point,
                            stats.repr_min, stats.repr_max).reshape(x.shape)
    else:
        # same divide-then-rint sequence as quantize() so both paths agree
        q = np.rint(x.data / sc)
        q += stats.zero_point
        np.clip(q, stats.repr_min, stats.repr_max, out=q)
        q -= stats.zero_point
        y = q * sc

    def backward(g):
        if not x.requires_grad:
            return
        if use_jit:
            gflat = np.ascontiguousarray(g).reshape(-1)
            dx = _jit.fq_backward(gflat, np.ascontiguousarray(x.data).reshape(-1),
                                  np.float32(stats.min_val),
                                  np.float32(stats.max_val))
            x.accumulate_grad(dx.reshape(x.shape))
        else:
            mask = (x.data >= stats.min_val) & (x.data <= stats.max_val)
            x.accumulate_grad(g * mask)

    return make_op(y, (x,), backward)


class Observer:
    """Running min/max range tracker for activations.

    ``moving_average`` mode updates r <- (1-c)*r + c*batch_extreme after the
    first batch initializes the range directly; ``absolute`` mode keeps the
    all-time min/max. The derived range always contains zero.
    """

    def __init__(self, mode="moving_average", averaging_constant=0.01,
                 signedness=UNSIGNED):
        if not 0.0 < averaging_constant <= 1.0:
            raise ValueError("averaging constant must be in (0, 1]")
        if mode not in ("moving_average", "absolute"):
            raise ValueError(f"unknown observer mode {mode!r}")
        self.mode = mode
        self.c = averaging_constant
        self.signedness = signedness
        self.min_val = None
        self.max_val = None
        self.count = 0

    def observe(self, data):
        data = data.data if isinstance(data, Tensor) else np.asarray(data)
        bmin = float(data.min())
        bmax = float(data.max())
        if self.count == 0:
            self.min_val, self.max_val = bmin, bmax
        elif self.mode == "moving_average":
            self.min_val = (1.0 - self.c) * self.min_val + self.c * bmin
            self.max_val = (1.0 - self.c) * self.max_val + self.c * bmax
        else:
            self.min_val = min(self.min_val, bmin)
            self.max_val = max(self.max_val, bmax)
        # the usable range must always contain zero
        self.min_val = min(self.min_val, 0.0)
        self.max_val = max(self.max_val, 0.0)
        self.count += 1

    def qparams(self):
        if self.count == 0:
            raise RuntimeError("observer has not seen any data")
        return compute_qparams(self.min_val, self.max_val, self.signedness)

    def state(self):
        return {"mode": self.mode, "c": self.c, "min": self.min_val,
                "max": self.max_val, "count": self.count}


class ActivationQuant:
    """Observer plus fake-quant applied at one activation boundary."""

    def __init__(self, averaging_constant=0.01, mode="moving_average"):
        self.observer = Observer(mode=mode, averaging_constant=averaging_constant,
                                 signedness=UNSIGNED)
        self.frozen = None  # set by convert/calibrate freeze

    def stats(self):
        if self.frozen is not None:
            return self.frozen
        return self.observer.qparams()

    def freeze(self):
        self.frozen = self.observer.qparams()
        return self.frozen

    def __call__(self, t, observe):
        if observe:
            self.observer.observe(t)
        return fake_quantize(t, self.stats())


def weight_qparams(w):
    """Per-tensor signed stats recomputed from the current weight values."""
    data = w.data if isinstance(w, Tensor) else np.asarray(w)
    return compute_qparams(float(data.min()), float(data.max()), SIGNED)
