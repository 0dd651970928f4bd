"""Dense tensors with a reverse-mode autodiff tape.

A Tensor wraps a numpy array plus an optional gradient buffer. Ops (see
ops.py) record parent links and a backward closure on the output tensor;
``backward()`` on a scalar loss walks the recorded graph once in reverse
topological order and accumulates gradients into every reachable tensor
that requires them. The tape is consumed by the walk: calling backward a
second time without re-running the forward pass raises.

Production graphs run in float32; test oracles build float64 tensors and
every op preserves the input dtype.
"""

import contextlib

import numpy as np

from .kernels import ShapeError

__all__ = ["Tensor", "Parameter", "ShapeError", "no_grad", "is_grad_enabled",
           "set_finite_checks"]

_grad_enabled = True
_finite_checks = False


def set_finite_checks(enabled):
    """Toggle per-op NaN/Inf assertions (off by default for speed)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_spent", "_grad_owned")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._spent = False
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g):
        # first contribution is borrowed (no copy); a second contribution
        # triggers an out-of-place add so shared buffers stay untouched
        if self.grad is None:
            self.grad = g if g.dtype == self.data.dtype else g.astype(self.data.dtype)
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self):
        """Populate .grad on every reachable tensor that requires it."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
        if self._spent:
            raise RuntimeError(
                "backward() called twice on the same recorded graph; "
                "re-run the forward pass first")
        if self._backward is None and not self.requires_grad:
            raise RuntimeError("loss tensor is not connected to a recorded graph")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                if node.grad is not None:
                    node._backward(node.grad)
                # op outputs are single-use; leaves (parameters, inputs)
                # stay reusable across forward passes
                node._spent = True
                node._backward = None
                node._parents = ()
        self._spent = True


class Parameter(Tensor):
    """Trainable leaf tensor with a stable name for optimizer/report keys."""

    __slots__ = ("name",)

    def __init__(self, data, name="", dtype=np.float32):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.shape)})"


def make_op(out_data, parents, backward_fn):
    """Create the output tensor of an op and record it on the tape.

    ``backward_fn(grad)`` must push gradient contributions into the parent
    tensors via ``accumulate_grad``. Recording is skipped when autodiff is
    globally disabled or no parent requires a gradient.
    """
    if _finite_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by an op forward")
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        for p in parents:
            if p._spent:
                raise RuntimeError(
                    "tensor participates in a graph that was already "
                    "back-propagated; re-run the forward pass")
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def check_finite_grad(g):
    if _finite_checks and not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite values produced by an op backward")
    return g
