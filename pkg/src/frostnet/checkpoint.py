"""Checkpoint format: a JSON manifest plus raw little-endian float32 blobs.

The manifest records the format version, architecture, precision mode,
and a named tensor index (offsets into tensors.bin); fake-quant and int8
checkpoints additionally record per-node observer state and frozen
quantization statistics as (min, max, scale, zero_point) records. An int8
checkpoint stores the trained fake-quant state and is re-lowered
deterministically on load, which reproduces the integer graph exactly.
"""

import json
import os

import numpy as np

from .arch import ArchSpec, build_frostnet
from .graph import FAKE_QUANT, FP, INT8
from .pipeline import convert_int8, prepare_qat

FORMAT_VERSION = 2


def _state_tensors(model):
    """name -> ndarray for everything a checkpoint must capture."""
    out = {}
    for p in model.parameters():
        out[p.name] = p.data
    for node in model.nodes:
        if node.kind == "batchnorm":
            out[f"{node.name}.running_mean"] = node.running_mean.data
            out[f"{node.name}.running_var"] = node.running_var.data
        elif node.kind == "qat_conv" and node.bn is not None:
            out[f"{node.bn.name}.running_mean"] = node.bn.running_mean.data
            out[f"{node.bn.name}.running_var"] = node.bn.running_var.data
    return out


def _quant_state(model):
    state = {}
    for node in model.nodes:
        oq = getattr(node, "out_quant", None)
        if oq is None:
            continue
        rec = {"observer": oq.observer.state()}
        if oq.frozen is not None:
            rec["frozen"] = oq.frozen.as_record()
        state[node.name] = rec
        ema = getattr(node, "_w_ema", None)
        if ema is not None and ema.count > 0:
            rec["weight_observer"] = ema.state()
    return state


def save_checkpoint(model, path, extra_meta=None):
    """Write manifest.json + tensors.bin under ``path`` (a directory)."""
    if model.mode == INT8:
        raise ValueError(
            "save the trained fake_quant model instead; int8 graphs are "
            "re-lowered deterministically on load (mode='int8' manifests "
            "come from save_for_int8)")
    os.makedirs(path, exist_ok=True)
    _write(model, path, model.mode, extra_meta)


def save_for_int8(model, path, extra_meta=None):
    """Record a fake-quant model whose load target is the int8 lowering."""
    if model.mode != FAKE_QUANT:
        raise ValueError("int8 checkpoints capture a trained fake_quant graph")
    os.makedirs(path, exist_ok=True)
    _write(model, path, INT8, extra_meta)


def _write(model, path, mode, extra_meta):
    tensors = _state_tensors(model)
    index = []
    offset = 0
    blob_path = os.path.join(path, "tensors.bin")
    with open(blob_path, "wb") as f:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            f.write(arr.tobytes())
            index.append({"name": name, "shape": list(arr.shape),
                          "offset": offset, "nbytes": arr.nbytes})
            offset += arr.nbytes
    manifest = {
        "version": FORMAT_VERSION,
        "mode": mode,
        "trained_mode": model.mode,
        "arch": model.meta.get("arch"),
        "input_res": model.meta.get("input_res"),
        "prepare": _prepare_kwargs(model),
        "tensors": index,
        "quant": _quant_state(model),
        "meta": dict(extra_meta or {}),
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def _prepare_kwargs(model):
    if model.mode == FP:
        return None
    for node in model.nodes:
        if node.kind == "qat_conv":
            return {"averaging_constant": node.out_quant.observer.c,
                    "observer_mode": node.out_quant.observer.mode,
                    "weight_observer": node.weight_observer}
    return None


def _restore_quant(model, quant_state):
    from .quant import QuantStats, Observer
    for node in model.nodes:
        oq = getattr(node, "out_quant", None)
        if oq is None or node.name not in quant_state:
            continue
        rec = quant_state[node.name]
        ob = rec["observer"]
        oq.observer.mode = ob["mode"]
        oq.observer.c = ob["c"]
        oq.observer.min_val = ob["min"]
        oq.observer.max_val = ob["max"]
        oq.observer.count = ob["count"]
        if "frozen" in rec:
            fz = rec["frozen"]
            oq.frozen = QuantStats(fz["min"], fz["max"], fz["scale"],
                                   fz["zero_point"], fz["signedness"])
        if "weight_observer" in rec and getattr(node, "_w_ema", None) is not None:
            wo = rec["weight_observer"]
            node._w_ema.min_val = wo["min"]
            node._w_ema.max_val = wo["max"]
            node._w_ema.count = wo["count"]


def load_checkpoint(path, expect_mode=None):
    """Rebuild a model from a checkpoint directory.

    ``expect_mode`` asserts what the caller wants back; a mismatch with
    the manifest is an explicit error, never a silent migration.
    """
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest["version"] != FORMAT_VERSION:
        raise ValueError(
            f"checkpoint format version {manifest['version']} does not match "
            f"this build's version {FORMAT_VERSION}; no silent migration")
    mode = manifest["mode"]
    if expect_mode is not None and expect_mode != mode:
        raise ValueError(
            f"checkpoint holds a {mode!r} model but {expect_mode!r} was "
            "requested")
    spec = ArchSpec.from_dict(manifest["arch"])
    model = build_frostnet(spec, spec.width_mult, spec.num_classes,
                           manifest.get("input_res") or 224)
    if mode in (FAKE_QUANT, INT8):
        prepare_qat(model, **(manifest.get("prepare") or {}))
    _load_tensors(model, path, manifest)
    _restore_quant(model, manifest.get("quant", {}))
    if mode == INT8:
        convert_int8(model)
    return model, manifest


def _load_tensors(model, path, manifest):
    tensors = _state_tensors(model)
    blob_path = os.path.join(path, "tensors.bin")
    data = np.fromfile(blob_path, dtype="<f4")
    expected = sum(t["nbytes"] for t in manifest["tensors"]) // 4
    if data.size != expected:
        raise ValueError(
            f"tensor blob {blob_path} holds {data.size * 4} bytes, manifest "
            f"expects {expected * 4}")
    seen = set()
    for rec in manifest["tensors"]:
        name = rec["name"]
        if name not in tensors:
            raise ValueError(f"checkpoint tensor {name!r} has no target in "
                             "the rebuilt graph (architecture mismatch)")
        start = rec["offset"] // 4
        count = rec["nbytes"] // 4
        arr = data[start:start + count].reshape(rec["shape"])
        target = tensors[name]
        if tuple(target.shape) != tuple(rec["shape"]):
            raise ValueError(f"shape mismatch for {name!r}: checkpoint "
                             f"{rec['shape']} vs graph {list(target.shape)}")
        target[...] = arr
        seen.add(name)
    missing = set(tensors) - seen
    if missing:
        raise ValueError(f"checkpoint is missing tensors: {sorted(missing)[:4]}")
