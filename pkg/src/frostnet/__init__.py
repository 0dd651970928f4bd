"""INT8 quantization-aware training toolkit.

Pieces: a minimal autodiff tensor core, affine INT8 quantization with
layer fusion and a true integer inference path, gradient-boosted SGD/AdamW
optimizers with momentum warm-up, FrostNet architecture builders with
exact parameter/FLOP counters, a FLOPs-constrained search harness, and a
CLI that ties them together.
"""

from .tensor import Tensor, Parameter, ShapeError, no_grad, set_finite_checks

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "ShapeError", "no_grad", "set_finite_checks",
           "__version__"]
