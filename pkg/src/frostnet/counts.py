"""Exact parameter and FLOP counters.

Params cover every trainable tensor including batchnorm affine pairs.
FLOPs are multiply-accumulate counts: k*k*(Cin/groups)*Cout*Hout*Wout per
convolution plus dense layers; pooling, activations, and normalization
are excluded (they fold away at inference).
"""

from . import graph as G
from .kernels import conv_out_size


def count_params(model):
    return int(sum(p.size for p in model.parameters()))


def infer_shapes(model, input_res, in_channels=3):
    """Propagate [C, H, W] shapes through an fp ModelGraph."""
    shapes = {model.nodes[0].name: (in_channels, input_res, input_res)}
    for node in model.nodes[1:]:
        xs = [shapes[i] for i in node.inputs]
        c, h, w = xs[0]
        if node.kind == "conv":
            k = node.weight.shape[2]
            ho = conv_out_size(h, k, node.stride, node.padding)
            wo = conv_out_size(w, k, node.stride, node.padding)
            shapes[node.name] = (node.weight.shape[0], ho, wo)
        elif node.kind == "maxpool":
            shapes[node.name] = (c, conv_out_size(h, node.k, node.stride, 0),
                                 conv_out_size(w, node.k, node.stride, 0))
        elif node.kind == "gap":
            shapes[node.name] = (c, 1, 1)
        elif node.kind == "concat":
            shapes[node.name] = (sum(s[0] for s in xs), h, w)
        elif node.kind == "flatten":
            shapes[node.name] = (c * h * w,)
        elif node.kind == "linear":
            shapes[node.name] = (node.weight.shape[0],)
        else:
            # act, bn, add, gating, quant stubs: shape preserving
            shapes[node.name] = xs[0]
    return shapes


def count_flops(model, input_res=224):
    """Multiply-accumulate count for one [1, 3, res, res] forward."""
    shapes = infer_shapes(model, input_res)
    total = 0
    for node in model.nodes:
        if node.kind == "conv":
            cout, cin_g, k, _ = node.weight.shape
            _, ho, wo = shapes[node.name]
            total += k * k * cin_g * cout * ho * wo
        elif node.kind == "linear":
            total += node.weight.size
    return int(total)
