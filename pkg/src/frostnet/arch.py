"""FrostNet architecture builders.

The FrostConv block replaces the squeeze-and-excite add-on of an inverted
residual bottleneck with a fusible squeeze-and-concatenate path: a 1x1
squeeze conv (in -> in//rf), concatenated with the block input, feeds the
1x1 expansion (-> in*ef), then the depthwise filter and the linear 1x1
projection. Every stage is Conv-BN(-ReLU), so the whole network fuses.

Variant tables list (kernel, out_ch, ef, rf, stride) per block; input
channels flow from the previous row. Width multipliers scale block
channels (stem and head stay fixed), rounding to multiples of 8 with a
floor of 8.
"""

import json
from dataclasses import dataclass

import numpy as np

from .graph import (ActNode, AddNode, BatchNormNode, ChannelMulNode,
                    ConcatNode, ConvNode, FlattenNode, GlobalAvgPoolNode,
                    HardSigmoidNode, InputNode, ModelGraph)
from .tensor import Parameter

MIN_CHANNELS = 8

# (kernel, out_ch, ef, rf, stride) rows at multiplier 1.0
FROSTNET_BASE = [
    (3, 16, 1, 1, 1),
    (5, 24, 6, 4, 2),
    (3, 24, 3, 4, 1),
    (5, 40, 3, 4, 2),
    (5, 40, 3, 4, 1),
    (5, 80, 3, 4, 2),
    (3, 80, 3, 4, 1),
    (5, 96, 3, 2, 1),
    (3, 96, 3, 4, 1),
    (5, 96, 3, 4, 1),
    (5, 96, 3, 4, 1),
    (5, 192, 6, 2, 2),
    (5, 192, 3, 2, 1),
    (5, 192, 3, 2, 1),
    (5, 192, 3, 2, 1),
    (5, 320, 6, 2, 1),
]

FROSTNET_LARGE = [
    (3, 16, 1, 1, 1),
    (3, 24, 6, 4, 2),
    (3, 24, 3, 4, 1),
    (5, 40, 6, 4, 2),
    (3, 40, 3, 4, 1),
    (5, 80, 6, 4, 2),
    (5, 80, 3, 4, 1),
    (5, 80, 3, 4, 1),
    (5, 96, 6, 4, 1),
    (5, 96, 3, 4, 1),
    (3, 96, 3, 4, 1),
    (3, 96, 3, 4, 1),
    (5, 192, 6, 2, 2),
    (5, 192, 6, 4, 1),
    (5, 192, 6, 4, 1),
    (5, 192, 3, 4, 1),
    (5, 192, 3, 4, 1),
    (5, 320, 6, 2, 1),
]

FROSTNET_SMALL = [
    (3, 16, 1, 1, 1),
    (5, 24, 6, 4, 2),
    (3, 24, 3, 4, 1),
    (5, 40, 3, 4, 2),
    (5, 40, 3, 4, 1),
    (5, 80, 3, 4, 2),
    (3, 80, 3, 4, 1),
    (5, 96, 3, 2, 1),
    (3, 96, 3, 4, 1),
    (5, 96, 3, 4, 1),
    (5, 192, 6, 2, 2),
    (5, 192, 3, 2, 1),
    (5, 192, 3, 2, 1),
    (5, 320, 6, 2, 1),
]

# desk-scale variant for 32x32 inputs: stride-1 stem, three downsamples,
# small head; used by the scratch-QAT study and the search proxy
FROSTNET_CIFAR = [
    (3, 16, 1, 1, 2),
    (3, 24, 3, 4, 1),
    (5, 40, 3, 4, 2),
    (3, 40, 3, 2, 1),
    (5, 80, 3, 2, 2),
    (3, 80, 3, 4, 1),
]

_VARIANTS = {
    "base": dict(blocks=FROSTNET_BASE, stem_ch=32, stem_stride=2, head_ch=1280),
    "large": dict(blocks=FROSTNET_LARGE, stem_ch=32, stem_stride=2, head_ch=1280),
    "small": dict(blocks=FROSTNET_SMALL, stem_ch=32, stem_stride=2, head_ch=1280),
    "cifar": dict(blocks=FROSTNET_CIFAR, stem_ch=16, stem_stride=1, head_ch=512),
}


@dataclass(frozen=True)
class FrostBlockSpec:
    """One architecture-table row with resolved input channels."""

    in_ch: int
    out_ch: int
    kernel: int
    ef: int
    rf: int
    stride: int

    def __post_init__(self):
        if self.kernel not in (3, 5):
            raise ValueError(f"kernel must be 3 or 5, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_ch // self.rf < 1:
            raise ValueError(
                f"squeeze width {self.in_ch}//{self.rf} < 1 is invalid")
        if min(self.in_ch, self.out_ch) < MIN_CHANNELS:
            raise ValueError(
                f"channel count under the minimum of {MIN_CHANNELS}: "
                f"in={self.in_ch} out={self.out_ch}")

    @property
    def squeeze_ch(self):
        return self.in_ch // self.rf

    @property
    def concat_ch(self):
        return self.in_ch + self.squeeze_ch

    @property
    def expand_ch(self):
        # the expansion conv widens its own input (the concat output);
        # this reading reproduces the published parameter/FLOP counts
        return self.concat_ch * self.ef

    @property
    def degenerate(self):
        return self.ef == 1 and self.rf == 1

    @property
    def has_residual(self):
        return self.in_ch == self.out_ch and self.stride == 1


@dataclass
class ArchSpec:
    """A full architecture: stem, ordered block rows, head, classifier."""

    variant: str
    blocks: list                 # (kernel, out_ch, ef, rf, stride) at mult 1.0
    stem_ch: int = 32
    stem_stride: int = 2
    head_ch: int = 1280
    width_mult: float = 1.0
    num_classes: int = 1000

    def block_specs(self):
        """Resolved per-block specs with the width multiplier applied."""
        specs = []
        in_ch = self.stem_ch
        for (k, out, ef, rf, s) in self.blocks:
            out_s = scale_channels(out, self.width_mult)
            specs.append(FrostBlockSpec(in_ch, out_s, k, ef, rf, s))
            in_ch = out_s
        return specs

    @property
    def downsample_factor(self):
        f = self.stem_stride
        for row in self.blocks:
            f *= row[4]
        return f

    def to_dict(self):
        return {"variant": self.variant, "blocks": [list(b) for b in self.blocks],
                "stem_ch": self.stem_ch, "stem_stride": self.stem_stride,
                "head_ch": self.head_ch, "width_mult": self.width_mult,
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d):
        return cls(variant=d["variant"],
                   blocks=[tuple(b) for b in d["blocks"]],
                   stem_ch=d["stem_ch"], stem_stride=d["stem_stride"],
                   head_ch=d["head_ch"], width_mult=d.get("width_mult", 1.0),
                   num_classes=d.get("num_classes", 1000))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def make_arch_spec(variant, width_mult=1.0, num_classes=1000):
    if isinstance(variant, ArchSpec):
        return variant
    key = variant.lower()
    if key not in _VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; "
                         f"choose from {sorted(_VARIANTS)} or pass an ArchSpec")
    v = _VARIANTS[key]
    return ArchSpec(variant=key, blocks=list(v["blocks"]), stem_ch=v["stem_ch"],
                    stem_stride=v["stem_stride"], head_ch=v["head_ch"],
                    width_mult=width_mult, num_classes=num_classes)


def scale_channels(c, mult):
    """Scale a channel count: nearest multiple of 8, floor 8, and never
    below 90% of the exact product."""
    if c < 1 or mult <= 0:
        raise ValueError(f"invalid channel scaling ({c}, {mult})")
    exact = c * mult
    v = max(MIN_CHANNELS, int(exact + 4) // 8 * 8)
    if v < 0.9 * exact:
        v += 8
    return v


def _kaiming_conv(rng, cout, cin_g, k):
    fan_out = k * k * cout
    std = np.sqrt(2.0 / fan_out)
    return (rng.standard_normal((cout, cin_g, k, k)) * std).astype(np.float32)


class GraphBuilder:
    """Accumulates named nodes; thin sugar over ModelGraph.add."""

    def __init__(self, seed, meta=None):
        self.g = ModelGraph(meta)
        self.rng = np.random.default_rng(seed)
        self.g.add(InputNode())

    def conv_bn_act(self, name, inp, cin, cout, k, stride=1, groups=1,
                    act="relu"):
        w = Parameter(_kaiming_conv(self.rng, cout, cin // groups, k),
                      f"{name}.conv.weight")
        out = self.g.add(ConvNode(f"{name}.conv", [inp], w, None, stride,
                                  k // 2, groups))
        out = self.g.add(BatchNormNode(f"{name}.bn", [out], cout))
        if act != "none":
            out = self.g.add(ActNode(f"{name}.{act}", [out], act))
        return out


def add_frost_conv(builder, prefix, inp, spec):
    """Append one FrostConv block; returns its output node name."""
    b = builder
    x = inp
    if spec.degenerate:
        # first-block form: depthwise filter then linear projection
        dw = b.conv_bn_act(f"{prefix}.dw", x, spec.in_ch, spec.in_ch,
                           spec.kernel, spec.stride, groups=spec.in_ch)
        out = b.conv_bn_act(f"{prefix}.project", dw, spec.in_ch, spec.out_ch,
                            1, act="none")
    else:
        sq = b.conv_bn_act(f"{prefix}.squeeze", x, spec.in_ch, spec.squeeze_ch, 1)
        cat = b.g.add(ConcatNode(f"{prefix}.concat", [x, sq]))
        ex = b.conv_bn_act(f"{prefix}.expand", cat, spec.concat_ch,
                           spec.expand_ch, 1)
        dw = b.conv_bn_act(f"{prefix}.dw", ex, spec.expand_ch, spec.expand_ch,
                           spec.kernel, spec.stride, groups=spec.expand_ch)
        out = b.conv_bn_act(f"{prefix}.project", dw, spec.expand_ch,
                            spec.out_ch, 1, act="none")
    if spec.has_residual:
        out = b.g.add(AddNode(f"{prefix}.residual", [x, out]))
    return out


def add_mbconv(builder, prefix, inp, in_ch, out_ch, kernel, ef, stride,
               use_se=False, se_reduction=4):
    """Inverted residual bottleneck, optionally with squeeze-and-excite."""
    b = builder
    x = inp
    exp_ch = in_ch * ef
    h = x
    if ef != 1:
        h = b.conv_bn_act(f"{prefix}.expand", x, in_ch, exp_ch, 1)
    h = b.conv_bn_act(f"{prefix}.dw", h, exp_ch, exp_ch, kernel, stride,
                      groups=exp_ch)
    if use_se:
        se_ch = max(MIN_CHANNELS, (in_ch // se_reduction + 4) // 8 * 8)
        gap = b.g.add(GlobalAvgPoolNode(f"{prefix}.se.gap", [h]))
        w1 = Parameter(_kaiming_conv(b.rng, se_ch, exp_ch, 1),
                       f"{prefix}.se.reduce.weight")
        b1 = Parameter(np.zeros(se_ch, np.float32), f"{prefix}.se.reduce.bias")
        r = b.g.add(ConvNode(f"{prefix}.se.reduce", [gap], w1, b1))
        r = b.g.add(ActNode(f"{prefix}.se.relu", [r], "relu"))
        w2 = Parameter(_kaiming_conv(b.rng, exp_ch, se_ch, 1),
                       f"{prefix}.se.restore.weight")
        b2 = Parameter(np.zeros(exp_ch, np.float32), f"{prefix}.se.restore.bias")
        e = b.g.add(ConvNode(f"{prefix}.se.restore", [r], w2, b2))
        gate = b.g.add(HardSigmoidNode(f"{prefix}.se.gate", [e]))
        h = b.g.add(ChannelMulNode(f"{prefix}.se.scale", [h, gate]))
    out = b.conv_bn_act(f"{prefix}.project", h, exp_ch, out_ch, 1, act="none")
    if in_ch == out_ch and stride == 1:
        out = b.g.add(AddNode(f"{prefix}.residual", [x, out]))
    return out


def build_frostnet(variant, width_mult=1.0, num_classes=1000, input_res=224,
                   seed=0):
    """Build a full-precision FrostNet ModelGraph.

    ``variant`` is one of "base"/"large"/"small"/"cifar" or an ArchSpec.
    The stem and head channel counts stay fixed under width scaling.
    """
    spec = make_arch_spec(variant, width_mult, num_classes)
    num_classes = spec.num_classes
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    factor = spec.downsample_factor
    if input_res % factor != 0:
        raise ValueError(
            f"input resolution {input_res} not divisible by the network's "
            f"downsample factor {factor}")
    b = GraphBuilder(seed, meta={"arch": spec.to_dict(), "input_res": input_res})
    x = b.conv_bn_act("stem", "input", 3, spec.stem_ch, 3, spec.stem_stride)
    for i, bs in enumerate(spec.block_specs()):
        x = add_frost_conv(b, f"block{i}", x, bs)
    last_ch = spec.block_specs()[-1].out_ch
    x = b.conv_bn_act("head", x, last_ch, spec.head_ch, 1)
    x = b.g.add(GlobalAvgPoolNode("gap", [x]))
    wc = Parameter(
        (b.rng.standard_normal((num_classes, spec.head_ch, 1, 1)) * 0.01
         ).astype(np.float32), "classifier.weight")
    bc = Parameter(np.zeros(num_classes, np.float32), "classifier.bias")
    x = b.g.add(ConvNode("classifier", [x], wc, bc, is_classifier=True))
    b.g.add(FlattenNode("logits", [x]))
    b.g.meta["stages"] = _stage_map(b.g)
    return b.g


def build_mbconv_net(blocks, stem_ch=32, stem_stride=2, head_ch=1280,
                     num_classes=1000, use_se=True, seed=0, input_res=224):
    """A baseline MBConv(+SE) network over the same table format, for
    ablation and latency comparison."""
    b = GraphBuilder(seed, meta={"input_res": input_res,
                                 "arch": {"variant": "mbconv",
                                          "blocks": [list(r) for r in blocks]}})
    x = b.conv_bn_act("stem", "input", 3, stem_ch, 3, stem_stride)
    in_ch = stem_ch
    for i, (k, out, ef, rf, s) in enumerate(blocks):
        x = add_mbconv(b, f"block{i}", x, in_ch, out, k, ef, s, use_se=use_se)
        in_ch = out
    x = b.conv_bn_act("head", x, in_ch, head_ch, 1)
    x = b.g.add(GlobalAvgPoolNode("gap", [x]))
    wc = Parameter((b.rng.standard_normal((num_classes, head_ch, 1, 1)) * 0.01
                    ).astype(np.float32), "classifier.weight")
    bc = Parameter(np.zeros(num_classes, np.float32), "classifier.bias")
    x = b.g.add(ConvNode("classifier", [x], wc, bc, is_classifier=True))
    b.g.add(FlattenNode("logits", [x]))
    b.g.meta["stages"] = _stage_map(b.g)
    return b.g


def _stage_map(graph):
    """node-name prefix -> stage label, for gradient-health grouping."""
    stages = {}
    for node in graph.nodes:
        top = node.name.split(".")[0]
        stages[node.name] = top
    return stages
