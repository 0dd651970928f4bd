"""Conv-BatchNorm(-activation) folding for eval-mode graphs.

Folding absorbs a finalized batchnorm into the preceding convolution:
    w' = w * gamma / sqrt(var + eps)   (per output channel)
    b' = beta + (b - mean) * gamma / sqrt(var + eps)
so the pattern executes as a single kernel. The activation kind rides
along so the integer path can apply it as a clamp.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class FusedConv:
    weight: np.ndarray          # folded, OIHW
    bias: np.ndarray            # folded, [O]
    stride: int
    padding: int
    groups: int
    activation: str             # "none" | "relu" | "relu6"


def fuse_conv_bn(conv_weight, conv_bias, gamma, beta, running_mean,
                 running_var, eps=1e-5, stride=1, padding=0, groups=1,
                 activation="none"):
    """Fold finalized BN statistics into the convolution parameters."""
    running_var = np.asarray(running_var)
    if np.any(running_var < 0):
        raise ValueError("negative running variance; batchnorm not finalized")
    if activation not in ("none", "relu", "relu6"):
        raise ValueError(f"unsupported fused activation {activation!r}")
    w = np.asarray(conv_weight, dtype=np.float64)
    factor = np.asarray(gamma, dtype=np.float64) / np.sqrt(running_var + eps)
    folded_w = w * factor.reshape(-1, 1, 1, 1)
    b = np.zeros(w.shape[0]) if conv_bias is None else np.asarray(conv_bias, np.float64)
    folded_b = np.asarray(beta, np.float64) + (b - np.asarray(running_mean, np.float64)) * factor
    return FusedConv(folded_w.astype(conv_weight.dtype),
                     folded_b.astype(conv_weight.dtype),
                     stride, padding, groups, activation)
