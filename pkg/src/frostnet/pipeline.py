"""The scratch-QAT workflow: momentum warm-up, preparation, fake-quant
training, integer conversion, and evaluation.

Order is enforced on the graph's precision mode: fp -> fake_quant -> int8,
never backward. The warm-up phase is ordinary full-precision training with
the same optimizer instance, so the momentum it accumulates carries into
the quantized phase (replacing a learning-rate warm-up); gradient boosting
stays off during warm-up by default and active during QAT.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .graph import (FAKE_QUANT, FP, INT8, ActNode, AddNode, BatchNormNode,
                    ChannelMulNode, ConcatNode, ConvNode, DequantizeNode,
                    FlattenNode, GlobalAvgPoolNode, HardSigmoidNode,
                    InputNode, IntAddNode, IntActNode, IntChannelMulNode,
                    IntConcatNode, IntConvNode, IntGapNode, IntHardSigmoidNode,
                    IntMaxPoolNode, IntQuantizeNode, MaxPoolNode, ModelGraph,
                    QATConvNode, QuantInputNode)
from .intops import QuantizedConv, hard_sigmoid_lut
from .quant import ActivationQuant, weight_qparams
from .tensor import no_grad

GRAD_ZERO_THRESHOLD = 1e-8


@dataclass
class EpochRecord:
    epoch: int
    phase: str                  # "fp" | "qat"
    loss: float
    acc: float
    lr: float
    wall_clock: float
    grad_stats: dict = field(default_factory=dict)


class TrainRunReport:
    """Per-epoch loss/accuracy/lr plus per-stage gradient summaries."""

    def __init__(self, meta=None):
        self.records = []
        self.meta = dict(meta or {})

    def add(self, record):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be recorded monotonically")
        self.records.append(record)

    def zero_fraction(self, epoch, stage):
        for r in self.records:
            if r.epoch == epoch and stage in r.grad_stats:
                return r.grad_stats[stage]["zero_fraction"]
        raise KeyError(f"no gradient stats for epoch {epoch} stage {stage!r}")

    def to_dict(self):
        return {"meta": self.meta,
                "records": [vars(r) for r in self.records]}

    @classmethod
    def from_dict(cls, d):
        rep = cls(d.get("meta"))
        for r in d["records"]:
            rep.records.append(EpochRecord(**r))
        return rep


def _stage_of(param_name):
    return param_name.split(".")[0]


def _collect_grad_stats(params):
    """Per-stage zero-fraction and median |g| from the current grads."""
    groups = {}
    for p in params:
        if p.grad is None:
            continue
        groups.setdefault(_stage_of(p.name), []).append(np.abs(p.grad).ravel())
    out = {}
    for stage, pieces in groups.items():
        allg = np.concatenate(pieces)
        out[stage] = {"zero_fraction": float((allg < GRAD_ZERO_THRESHOLD).mean()),
                      "median_abs": float(np.median(allg))}
    return out


def run_training_epochs(model, optimizer, data_fn, epochs, phase, report=None,
                        lr_fn=None, epoch_offset=0):
    """Shared minibatch loop for warm-up and QAT phases.

    ``data_fn(epoch)`` yields (x, labels) batches; ``lr_fn(epoch)`` returns
    the absolute learning rate (defaults to the optimizer's base rate).
    Per-stage gradient zero-fractions are averaged over the epoch; the
    median |g| comes from the final batch.
    """
    params = optimizer.params
    expected_batches = None
    for e in range(epochs):
        epoch = epoch_offset + e
        lr_now = optimizer.lr if lr_fn is None else lr_fn(epoch)
        mult = lr_now / optimizer.lr
        t0 = time.perf_counter()
        loss_sum = 0.0
        seen = 0
        correct = 0
        n_batches = 0
        zf_sums = {}
        last_stats = {}
        for x, y in data_fn(epoch):
            logits = model.forward(x, training=True)
            loss = ops.softmax_cross_entropy(logits, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(mult)
            n = len(y)
            loss_sum += loss.item() * n
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += n
            n_batches += 1
            last_stats = _collect_grad_stats(params)
            for stage, st in last_stats.items():
                zf_sums[stage] = zf_sums.get(stage, 0.0) + st["zero_fraction"]
        if n_batches == 0:
            raise RuntimeError(f"data exhausted: epoch {epoch} yielded no batches")
        if expected_batches is None:
            expected_batches = n_batches
        elif n_batches < expected_batches:
            raise RuntimeError(
                f"data exhausted mid-epoch: epoch {epoch} yielded {n_batches} "
                f"of {expected_batches} batches")
        grad_stats = {
            stage: {"zero_fraction": zf_sums[stage] / n_batches,
                    "median_abs": last_stats.get(stage, {}).get("median_abs", 0.0)}
            for stage in zf_sums}
        if report is not None:
            report.add(EpochRecord(epoch=epoch, phase=phase,
                                   loss=loss_sum / max(seen, 1),
                                   acc=correct / max(seen, 1), lr=lr_now,
                                   wall_clock=time.perf_counter() - t0,
                                   grad_stats=grad_stats))
    return model


def statassist_warmup(model, optimizer, data_fn, fp_epochs=1, report=None,
                      lr_fn=None, boost_during_warmup=False):
    """Charge the optimizer's momentum with full-precision epochs.

    Runs exactly ``fp_epochs`` of standard FP training; weights and
    optimizer state both carry over into the quantized phase.
    """
    if fp_epochs < 1:
        raise ValueError("warm-up needs at least one full-precision epoch")
    if model.mode != FP:
        raise RuntimeError(f"warm-up requires an fp-mode graph, got {model.mode}")
    prev = optimizer.boost_enabled
    optimizer.set_boost(boost_during_warmup)
    try:
        run_training_epochs(model, optimizer, data_fn, fp_epochs, "fp",
                            report, lr_fn, epoch_offset=0)
    finally:
        optimizer.set_boost(prev)
    return model, optimizer


def prepare_qat(model, averaging_constant=0.01, observer_mode="moving_average",
                weight_observer="moving_average"):
    """Fuse quantizable patterns and insert fake-quant machinery.

    Conv-BN(-ReLU/ReLU6), Conv-ReLU, and bare Conv collapse into QATConv
    nodes (same parameter objects, so optimizer state stays attached); the
    input, residual adds, concats, and gating ops get their own output
    observers. The final classifier stays unquantized. A batchnorm that
    does not directly follow its own conv is unfusible and rejected.
    """
    if model.mode != FP:
        raise RuntimeError(
            f"prepare_qat requires an fp-mode graph (got {model.mode!r}); "
            "a graph cannot be prepared twice")
    cons = model.consumers()

    for node in model.nodes:
        if node.kind == "batchnorm":
            src = model.by_name[node.inputs[0]]
            if src.kind != "conv" or src.is_classifier or len(cons[src.name]) != 1:
                raise ValueError(
                    f"unfusible pattern: batchnorm {node.name!r} is not the "
                    f"sole consumer of a quantizable conv (input {src.name!r})")

    def make_quant():
        return ActivationQuant(averaging_constant=averaging_constant,
                               mode=observer_mode)

    absorbed = set()
    alias = {}
    new_nodes = []
    unfusible = []

    def wire(names):
        return [alias.get(n, n) for n in names]

    for node in model.nodes:
        if node.name in absorbed:
            continue
        if node.kind == "input":
            new_nodes.append(node)
            q = QuantInputNode(f"{node.name}.quant", [node.name])
            q.out_quant = make_quant()
            new_nodes.append(q)
            alias[node.name] = q.name
        elif node.kind == "conv" and not node.is_classifier:
            members = [node]
            cur = node
            nxt = (model.by_name[cons[cur.name][0]]
                   if len(cons[cur.name]) == 1 else None)
            bn = None
            if nxt is not None and nxt.kind == "batchnorm":
                bn = nxt
                members.append(bn)
                cur = bn
                nxt = (model.by_name[cons[cur.name][0]]
                       if len(cons[cur.name]) == 1 else None)
            act = "none"
            if nxt is not None and nxt.kind == "act":
                act = nxt.fn
                members.append(nxt)
            qat = QATConvNode(members[-1].name, wire(node.inputs), node, bn, act,
                              weight_observer=weight_observer)
            qat.out_quant = make_quant()
            absorbed.update(m.name for m in members[1:])
            new_nodes.append(qat)
        elif node.kind in ("add", "concat", "hard_sigmoid", "channel_mul"):
            node.inputs = wire(node.inputs)
            node.out_quant = make_quant()
            if node.kind == "channel_mul":
                unfusible.append(node.name)
            new_nodes.append(node)
        else:
            # classifier conv, pools, flatten, standalone activations
            node.inputs = wire(node.inputs)
            new_nodes.append(node)

    model.rebuild(new_nodes, FAKE_QUANT)
    model.meta["unfusible"] = unfusible
    return model


def calibrate(model, data_fn, n_batches):
    """Post-training calibration: observe activations on ``n_batches``
    eval-mode batches, then freeze every observer."""
    if n_batches < 1:
        raise ValueError("calibration needs at least one batch")
    if model.mode != FAKE_QUANT:
        raise RuntimeError("calibrate requires a prepared (fake_quant) graph")
    it = iter(data_fn(0))
    for i in range(n_batches):
        try:
            x, _ = next(it)
        except StopIteration:
            raise RuntimeError(
                f"calibration stream exhausted after {i} of {n_batches} batches")
        with no_grad():
            model.forward(x, training=False, observe=True, simulate=False)
    for node in model.quant_boundary_nodes():
        node.out_quant.freeze()
    return model


def qat_train(model, optimizer, data_fn, epochs, report=None, lr_fn=None,
              epoch_offset=0):
    """Fake-quant training: weight stats recompute per step, activation
    observers update per step, gradient summaries land in the report."""
    if model.mode != FAKE_QUANT:
        raise RuntimeError(f"qat_train requires a prepared graph, got {model.mode}")
    if epochs == 0:
        return model, report
    run_training_epochs(model, optimizer, data_fn, epochs, "qat", report,
                        lr_fn, epoch_offset)
    return model, report


def convert_int8(model):
    """Freeze statistics and lower every fused pattern to integer kernels.

    The resulting graph is evaluation-only: forward works on uint8 feature
    maps and the unquantized classifier runs in float after an explicit
    dequantize. Unobserved activations are an error.
    """
    if model.mode != FAKE_QUANT:
        raise RuntimeError(
            f"convert_int8 requires a fake_quant-mode graph, got {model.mode!r}")
    for node in model.quant_boundary_nodes():
        oq = node.out_quant
        if oq.observer.count == 0 and oq.frozen is None:
            raise ValueError(f"unobserved activation at node {node.name!r}")

    stats_of = {}
    new_nodes = []
    for node in model.nodes:
        if node.kind == "input":
            new_nodes.append(node)
        elif node.kind == "quant_input":
            st = node.out_quant.freeze()
            new_nodes.append(IntQuantizeNode(node.name, node.inputs, st))
            stats_of[node.name] = st
        elif node.kind == "qat_conv":
            fused = node.folded()
            w_st = node.convert_weight_stats(fused.weight)
            in_st = stats_of[node.inputs[0]]
            out_st = node.out_quant.freeze()
            qc = QuantizedConv(fused, in_st, w_st, out_st)
            new_nodes.append(IntConvNode(node.name, node.inputs, qc))
            stats_of[node.name] = out_st
        elif node.kind == "add":
            out_st = node.out_quant.freeze()
            new_nodes.append(IntAddNode(node.name, node.inputs,
                                        stats_of[node.inputs[0]],
                                        stats_of[node.inputs[1]], out_st))
            stats_of[node.name] = out_st
        elif node.kind == "concat":
            out_st = node.out_quant.freeze()
            new_nodes.append(IntConcatNode(
                node.name, node.inputs,
                [stats_of[i] for i in node.inputs], out_st))
            stats_of[node.name] = out_st
        elif node.kind == "hard_sigmoid":
            out_st = node.out_quant.freeze()
            in_st = stats_of[node.inputs[0]]
            new_nodes.append(IntHardSigmoidNode(
                node.name, node.inputs, hard_sigmoid_lut(in_st, out_st)))
            stats_of[node.name] = out_st
        elif node.kind == "channel_mul":
            out_st = node.out_quant.freeze()
            new_nodes.append(IntChannelMulNode(
                node.name, node.inputs, stats_of[node.inputs[0]],
                stats_of[node.inputs[1]], out_st))
            stats_of[node.name] = out_st
        elif node.kind == "maxpool":
            new_nodes.append(IntMaxPoolNode(node.name, node.inputs, node.k,
                                            node.stride))
            stats_of[node.name] = stats_of[node.inputs[0]]
        elif node.kind == "gap":
            in_st = stats_of[node.inputs[0]]
            new_nodes.append(IntGapNode(node.name, node.inputs, in_st))
            stats_of[node.name] = in_st
        elif node.kind == "act":
            in_st = stats_of[node.inputs[0]]
            new_nodes.append(IntActNode(node.name, node.inputs, node.fn, in_st))
            stats_of[node.name] = in_st
        elif node.kind == "conv" and node.is_classifier:
            in_st = stats_of[node.inputs[0]]
            deq = DequantizeNode(f"{node.name}.dequant", node.inputs, in_st)
            new_nodes.append(deq)
            node.inputs = [deq.name]
            new_nodes.append(node)
            stats_of[node.name] = None
        elif node.kind == "flatten":
            new_nodes.append(node)
        else:
            raise RuntimeError(
                f"cannot lower node {node.name!r} of kind {node.kind!r} to int8")

    model.rebuild(new_nodes, INT8)
    return model


def evaluate(model, dataset, batch_size=256):
    """Top-1 accuracy over a full split; deterministic."""
    from .data import epoch_batches
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty split")
    correct = 0
    for x, y in epoch_batches(dataset, batch_size, 0, 0, train=False):
        if model.mode == INT8:
            logits = model.forward(x)
        else:
            with no_grad():
                logits = model.forward(x, training=False).data
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / len(dataset)
