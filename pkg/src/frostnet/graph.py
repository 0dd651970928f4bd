"""Model graphs: ordered layer DAGs with a precision mode.

A ModelGraph is a topologically ordered list of named nodes; each node
lists its input node names. The same graph object moves through the
precision modes fp -> fake_quant -> int8 (never backward): preparation
replaces fusible Conv-BN(-act) chains with QATConv nodes, conversion
replaces those with integer-kernel nodes. Full-precision and fake-quant
forwards run on the autodiff tape; the int8 forward runs on raw uint8
arrays and rejects backward passes by construction.
"""

import numpy as np

from . import ops, intops
from .fusion import fuse_conv_bn
from .quant import (ActivationQuant, Observer, fake_quantize, quantize,
                    weight_qparams)
from .tensor import Parameter, Tensor

FP, FAKE_QUANT, INT8 = "fp", "fake_quant", "int8"


class Node:
    kind = "node"

    def __init__(self, name, inputs):
        self.name = name
        self.inputs = list(inputs)

    def params(self):
        return []

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class InputNode(Node):
    kind = "input"

    def __init__(self, name="input"):
        super().__init__(name, [])


class ConvNode(Node):
    kind = "conv"

    def __init__(self, name, inputs, weight, bias=None, stride=1, padding=0,
                 groups=1, is_classifier=False):
        super().__init__(name, inputs)
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.is_classifier = is_classifier

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, xs, ctx):
        return ops.conv2d(xs[0], self.weight, self.bias, self.stride,
                          self.padding, self.groups)


class BatchNormNode(Node):
    kind = "batchnorm"

    def __init__(self, name, inputs, channels, eps=1e-5, momentum=0.1):
        super().__init__(name, inputs)
        self.gamma = Parameter(np.ones(channels, np.float32), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, np.float32), f"{name}.beta")
        self.running_mean = Tensor(np.zeros(channels, np.float32))
        self.running_var = Tensor(np.ones(channels, np.float32))
        self.eps = eps
        self.momentum = momentum

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, xs, ctx):
        return ops.batchnorm2d(xs[0], self.gamma, self.beta, self.running_mean,
                               self.running_var, self.eps, ctx.training,
                               self.momentum)


class ActNode(Node):
    kind = "act"

    def __init__(self, name, inputs, fn="relu"):
        super().__init__(name, inputs)
        self.fn = fn

    def forward(self, xs, ctx):
        return ops.activation(xs[0], self.fn)


class MaxPoolNode(Node):
    kind = "maxpool"

    def __init__(self, name, inputs, k, stride):
        super().__init__(name, inputs)
        self.k = k
        self.stride = stride

    def forward(self, xs, ctx):
        return ops.maxpool2d(xs[0], self.k, self.stride)


class GlobalAvgPoolNode(Node):
    kind = "gap"

    def forward(self, xs, ctx):
        return ops.global_avgpool(xs[0])


class ConcatNode(Node):
    kind = "concat"

    def __init__(self, name, inputs):
        super().__init__(name, inputs)
        self.out_quant = None

    def forward(self, xs, ctx):
        y = ops.concat_channels(xs)
        return _maybe_quant(y, self.out_quant, ctx)


class AddNode(Node):
    kind = "add"

    def __init__(self, name, inputs):
        super().__init__(name, inputs)
        self.out_quant = None

    def forward(self, xs, ctx):
        y = ops.add(xs[0], xs[1])
        return _maybe_quant(y, self.out_quant, ctx)


class HardSigmoidNode(Node):
    kind = "hard_sigmoid"

    def __init__(self, name, inputs):
        super().__init__(name, inputs)
        self.out_quant = None

    def forward(self, xs, ctx):
        y = ops.hard_sigmoid(xs[0])
        return _maybe_quant(y, self.out_quant, ctx)


class ChannelMulNode(Node):
    kind = "channel_mul"

    def __init__(self, name, inputs):
        super().__init__(name, inputs)
        self.out_quant = None

    def forward(self, xs, ctx):
        y = ops.channel_multiply(xs[0], xs[1])
        return _maybe_quant(y, self.out_quant, ctx)


class FlattenNode(Node):
    kind = "flatten"

    def forward(self, xs, ctx):
        return ops.flatten2d(xs[0])


class QuantInputNode(Node):
    """Observes and fake-quantizes the network input."""

    kind = "quant_input"

    def __init__(self, name, inputs):
        super().__init__(name, inputs)
        self.out_quant = ActivationQuant()

    def forward(self, xs, ctx):
        return _maybe_quant(xs[0], self.out_quant, ctx)


class QATConvNode(Node):
    """A fused Conv-BN(-act) pattern under fake quantization.

    Training simulates the folded kernel: the weight is scaled by
    gamma/sqrt(running_var + eps) before weight fake-quant, the conv output
    is scaled back, and batch-stat BN follows (so BN keeps training). In
    eval mode the same composition collapses to the folded conv exactly.
    The fold factor is detached: no gradient flows through it.
    """

    kind = "qat_conv"

    def __init__(self, name, inputs, conv, bn=None, act="none",
                 weight_observer="fresh"):
        super().__init__(name, inputs)
        self.conv = conv
        self.bn = bn
        self.act = act
        self.out_quant = ActivationQuant()
        # "fresh" recomputes weight min/max each step; "moving_average"
        # tracks them with a lagging EMA (older-framework behavior)
        self.weight_observer = weight_observer
        self._w_ema = (Observer(mode="moving_average", averaging_constant=0.01,
                                signedness="signed")
                       if weight_observer == "moving_average" else None)

    def _weight_stats(self, w_eff, observe):
        if self._w_ema is None:
            return weight_qparams(w_eff)
        if observe or self._w_ema.count == 0:
            self._w_ema.observe(w_eff)
        return self._w_ema.qparams()

    def convert_weight_stats(self, folded_weight):
        """Stats the integer path must quantize with: whatever the eval
        fake-quant path would use."""
        if self._w_ema is None or self._w_ema.count == 0:
            return weight_qparams(folded_weight)
        return self._w_ema.qparams()

    def params(self):
        ps = list(self.conv.params())
        if self.bn is not None:
            ps += self.bn.params()
        return ps

    def forward(self, xs, ctx):
        x = xs[0]
        c = self.conv
        if self.bn is not None:
            bn = self.bn
            sf = bn.gamma.data / np.sqrt(bn.running_var.data + bn.eps)
            w_eff = ops.mul_channelwise(c.weight, sf, axis=0)
            if ctx.simulate:
                w_eff = fake_quantize(w_eff, self._weight_stats(w_eff, ctx.observe))
            y = ops.conv2d(x, w_eff, None, c.stride, c.padding, c.groups)
            if ctx.training:
                # batch statistics absorb the folded per-channel scale up
                # to sign, so BN runs directly on the conv output with
                # gamma*sign(sf); running stats are rescaled back into the
                # unfolded domain for eval/conversion
                signs = np.sign(sf)
                gamma_eff = ops.mul_sign(bn.gamma, signs)
                with np.errstate(divide="ignore"):
                    inv_sf = np.where(sf != 0.0, 1.0 / sf, 0.0)
                y = ops.batchnorm2d(y, gamma_eff, bn.beta, bn.running_mean,
                                    bn.running_var, bn.eps, True, bn.momentum,
                                    running_scale=inv_sf)
            else:
                # eval: conv with the folded weight plus the folded bias
                folded_bias = (bn.beta.data
                               - bn.running_mean.data * sf)
                y = ops.add_channelwise(y, folded_bias)
        else:
            w_eff = c.weight
            if ctx.simulate:
                w_eff = fake_quantize(w_eff, self._weight_stats(w_eff, ctx.observe))
            y = ops.conv2d(x, w_eff, c.bias, c.stride, c.padding, c.groups)
        if self.act != "none":
            y = ops.activation(y, self.act)
        return _maybe_quant(y, self.out_quant, ctx)

    def folded(self):
        """Eval-mode folded parameters (float), for conversion."""
        c = self.conv
        if self.bn is None:
            bias = c.bias.data if c.bias is not None else np.zeros(
                c.weight.shape[0], np.float32)
            return fuse_conv_bn(
                c.weight.data, bias,
                np.ones(c.weight.shape[0]), np.zeros(c.weight.shape[0]),
                np.zeros(c.weight.shape[0]), np.ones(c.weight.shape[0]) - 1e-5,
                eps=1e-5, stride=c.stride, padding=c.padding, groups=c.groups,
                activation=self.act)
        bn = self.bn
        bias = c.bias.data if c.bias is not None else None
        return fuse_conv_bn(c.weight.data, bias, bn.gamma.data, bn.beta.data,
                            bn.running_mean.data, bn.running_var.data, bn.eps,
                            c.stride, c.padding, c.groups, self.act)


def _maybe_quant(y, out_quant, ctx):
    if out_quant is None:
        return y
    if ctx.observe:
        out_quant.observer.observe(y)
    if ctx.simulate:
        if out_quant.observer.count == 0 and out_quant.frozen is None:
            return y
        return fake_quantize(y, out_quant.stats())
    return y


class IntQuantizeNode(Node):
    kind = "int_quantize"

    def __init__(self, name, inputs, stats):
        super().__init__(name, inputs)
        self.stats = stats

    def forward(self, xs, ctx):
        return quantize(xs[0], self.stats).astype(np.uint8)


class IntConvNode(Node):
    kind = "int_conv"

    def __init__(self, name, inputs, qconv):
        super().__init__(name, inputs)
        self.qconv = qconv

    def forward(self, xs, ctx):
        return self.qconv(xs[0])


class IntAddNode(Node):
    kind = "int_add"

    def __init__(self, name, inputs, a_stats, b_stats, out_stats):
        super().__init__(name, inputs)
        self.a_stats, self.b_stats, self.out_stats = a_stats, b_stats, out_stats

    def forward(self, xs, ctx):
        return intops.int_add(xs[0], self.a_stats, xs[1], self.b_stats,
                              self.out_stats)


class IntConcatNode(Node):
    kind = "int_concat"

    def __init__(self, name, inputs, part_stats, out_stats):
        super().__init__(name, inputs)
        self.part_stats, self.out_stats = part_stats, out_stats

    def forward(self, xs, ctx):
        return intops.int_concat(xs, self.part_stats, self.out_stats)


class IntMaxPoolNode(Node):
    kind = "int_maxpool"

    def __init__(self, name, inputs, k, stride):
        super().__init__(name, inputs)
        self.k, self.stride = k, stride

    def forward(self, xs, ctx):
        return intops.int_maxpool(xs[0], self.k, self.stride)


class IntGapNode(Node):
    kind = "int_gap"

    def __init__(self, name, inputs, in_stats):
        super().__init__(name, inputs)
        self.in_stats = in_stats

    def forward(self, xs, ctx):
        return intops.int_global_avgpool(xs[0], self.in_stats)


class IntActNode(Node):
    kind = "int_act"

    def __init__(self, name, inputs, fn, stats):
        super().__init__(name, inputs)
        self.fn = fn
        self.stats = stats

    def forward(self, xs, ctx):
        lo = max(self.stats.repr_min, self.stats.zero_point)
        hi = self.stats.repr_max
        if self.fn == "relu6":
            hi = min(hi, self.stats.zero_point
                     + int(np.rint(6.0 / self.stats.scale)))
        return np.clip(xs[0], lo, hi).astype(np.uint8)


class IntHardSigmoidNode(Node):
    kind = "int_hard_sigmoid"

    def __init__(self, name, inputs, lut):
        super().__init__(name, inputs)
        self.lut = lut

    def forward(self, xs, ctx):
        return self.lut[xs[0]]


class IntChannelMulNode(Node):
    kind = "int_channel_mul"

    def __init__(self, name, inputs, x_stats, g_stats, out_stats):
        super().__init__(name, inputs)
        self.x_stats, self.g_stats, self.out_stats = x_stats, g_stats, out_stats

    def forward(self, xs, ctx):
        return intops.int_channel_multiply(xs[0], self.x_stats, xs[1],
                                           self.g_stats, self.out_stats)


class DequantizeNode(Node):
    kind = "dequantize"

    def __init__(self, name, inputs, stats):
        super().__init__(name, inputs)
        self.stats = stats

    def forward(self, xs, ctx):
        x = ((xs[0].astype(np.float32) - self.stats.zero_point)
             * np.float32(self.stats.scale))
        return Tensor(x)


class _Ctx:
    __slots__ = ("training", "observe", "simulate")

    def __init__(self, training, observe, simulate):
        self.training = training
        self.observe = observe
        self.simulate = simulate


class ModelGraph:
    """Ordered layer list with enforced precision-mode transitions."""

    def __init__(self, meta=None):
        self.nodes = []
        self.by_name = {}
        self.mode = FP
        self.meta = dict(meta or {})

    def add(self, node):
        if node.name in self.by_name:
            raise ValueError(f"duplicate node name {node.name!r}")
        for inp in node.inputs:
            if inp not in self.by_name:
                raise ValueError(f"node {node.name!r} references unknown input {inp!r}")
        self.nodes.append(node)
        self.by_name[node.name] = node
        return node.name

    @property
    def output_name(self):
        return self.nodes[-1].name

    def rebuild(self, nodes, mode):
        self.nodes = []
        self.by_name = {}
        self.mode = mode
        for n in nodes:
            self.add(n)

    def parameters(self):
        out = []
        for node in self.nodes:
            out.extend(node.params())
        return out

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def consumers(self):
        cons = {n.name: [] for n in self.nodes}
        for n in self.nodes:
            for inp in n.inputs:
                cons[inp].append(n.name)
        return cons

    def forward(self, x, training=False, observe=None, simulate=True):
        """Run the graph on a [N, 3, H, W] batch; returns [N, k] logits.

        fp/fake_quant modes return a Tensor on the tape; int8 mode returns
        a plain float32 ndarray (the int8 graph is evaluation-only).
        """
        if self.mode == INT8 and training:
            raise RuntimeError("int8 graphs are evaluation-only")
        observe = training if observe is None else observe
        ctx = _Ctx(training, observe and self.mode == FAKE_QUANT,
                   simulate and self.mode == FAKE_QUANT)
        value = x if isinstance(x, Tensor) or self.mode == INT8 else Tensor(x)
        values = {self.nodes[0].name: value}
        remaining = {name: len(c) for name, c in self.consumers().items()}
        for node in self.nodes[1:]:
            xs = [values[i] for i in node.inputs]
            values[node.name] = node.forward(xs, ctx)
            for inp in node.inputs:
                remaining[inp] -= 1
                if remaining[inp] == 0:
                    del values[inp]
        out = values[self.output_name]
        if self.mode == INT8 and isinstance(out, Tensor):
            return out.data
        return out

    def quant_boundary_nodes(self):
        return [n for n in self.nodes
                if getattr(n, "out_quant", None) is not None]
