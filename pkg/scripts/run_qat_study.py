#!/usr/bin/env python3
"""Full scratch-QAT comparison study.

For each seed, trains three arms of the reduced 32x32 FrostNet at width
0.5 for the same total epoch budget on the full train split:

  fp          - plain full-precision training (the baseline bound)
  statassist  - 1 warm-up FP epoch charging momentum, then boosted QAT
  cold        - plain scratch QAT (no warm-up, no boosting)

Results (per-arm accuracies, int8/fake-quant agreement, per-epoch reports)
append incrementally to a JSON cache keyed by the run configuration, so
partial progress survives interruption and the acceptance suite can
verify recorded results without retraining.
"""

import argparse
import hashlib
import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from frostnet import _jit
from frostnet.arch import build_frostnet
from frostnet.counts import count_params, count_flops
from frostnet.data import epoch_batches, resolve_dataset
from frostnet.optim import GradBoostHyper, GradBoostSGD, lr_schedule
from frostnet.pipeline import (TrainRunReport, convert_int8, evaluate,
                               prepare_qat, qat_train, statassist_warmup)

DEFAULTS = dict(variant="cifar", width_mult=0.5, input_res=32, epochs=30,
                batch_size=200, lr=0.05, momentum=0.9, weight_decay=1e-4,
                schedule="poly", boost_prob=0.5, gamma1=0.999, gamma2=0.01,
                gamma3=0.9999, data_seed=3)


def config_key(cfg):
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def predictions(model, dataset, batch_size=500):
    from frostnet.tensor import no_grad
    preds = []
    for x, _ in epoch_batches(dataset, batch_size, 0, 0, train=False):
        if model.mode == "int8":
            logits = model.forward(x)
        else:
            with no_grad():
                logits = model.forward(x, training=False).data
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def run_arm(arm, seed, cfg, train, test):
    t_start = time.time()
    model = build_frostnet(cfg["variant"], cfg["width_mult"], 10,
                           cfg["input_res"], seed=seed)
    boost = GradBoostHyper(boost_prob=cfg["boost_prob"], gamma1=cfg["gamma1"],
                           gamma2=cfg["gamma2"], gamma3=cfg["gamma3"])
    if arm == "cold":
        boost = GradBoostHyper(boost_prob=0.0)
    opt = GradBoostSGD(model.parameters(), lr=cfg["lr"],
                       momentum=cfg["momentum"],
                       weight_decay=cfg["weight_decay"], hyper=boost,
                       seed=seed + 1000)
    epochs = cfg["epochs"]

    def lr_fn(e):
        return lr_schedule(cfg["schedule"], e, epochs, cfg["lr"])

    def data_fn(e):
        return epoch_batches(train, cfg["batch_size"], e,
                             seed=(cfg["data_seed"], seed), train=True)

    report = TrainRunReport(meta={"arm": arm, "seed": seed})
    out = {"arm": arm, "seed": seed}
    if arm == "fp":
        statassist_warmup(model, opt, data_fn, epochs, report, lr_fn)
        out["fp_acc"] = evaluate(model, test)
    else:
        offset = 0
        if arm == "statassist":
            statassist_warmup(model, opt, data_fn, 1, report, lr_fn)
            offset = 1
        prepare_qat(model)
        qat_train(model, opt, data_fn, epochs - offset, report, lr_fn,
                  epoch_offset=offset)
        out["fq_acc"] = evaluate(model, test)
        pred_fq = predictions(model, test)
        convert_int8(model)
        out["int8_acc"] = evaluate(model, test)
        pred_int8 = predictions(model, test)
        out["int8_fq_agreement"] = float((pred_fq == pred_int8).mean())
    out["report"] = report.to_dict()
    out["wall_clock"] = time.time() - t_start
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/qat_study.json")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=DEFAULTS["epochs"])
    ap.add_argument("--data-root", default=None)
    ap.add_argument("--n-train", type=int, default=50000)
    ap.add_argument("--n-test", type=int, default=10000)
    args = ap.parse_args()

    cfg = dict(DEFAULTS)
    cfg["epochs"] = args.epochs
    cfg["n_train"] = args.n_train
    key = config_key(cfg)

    _jit.warmup()
    train, test = resolve_dataset(args.data_root, n_train=args.n_train,
                                  n_test=args.n_test)
    cfg_record = dict(cfg, train_source=train.source, n_train=len(train),
                      n_test=len(test))

    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    state = {"config": cfg_record, "key": key, "runs": []}
    if os.path.exists(args.out):
        with open(args.out) as f:
            prev = json.load(f)
        if prev.get("key") == key:
            state = prev

    model = build_frostnet(cfg["variant"], cfg["width_mult"], 10,
                           cfg["input_res"])
    state["arch"] = {"params": count_params(model),
                     "flops": count_flops(model, cfg["input_res"])}

    done = {(r["arm"], r["seed"]) for r in state["runs"]}
    for seed in args.seeds:
        for arm in ("fp", "statassist", "cold"):
            if (arm, seed) in done:
                print(f"[skip] {arm} seed {seed} (cached)", flush=True)
                continue
            print(f"[run ] {arm} seed {seed} ...", flush=True)
            result = run_arm(arm, seed, cfg, train, test)
            state["runs"].append(result)
            tmp = args.out + ".tmp"
            with open(tmp, "w") as f:
                json.dump(state, f)
            os.replace(tmp, args.out)
            acc = result.get("fp_acc") or result.get("int8_acc")
            print(f"[done] {arm} seed {seed}: acc {acc:.4f} "
                  f"({result['wall_clock']:.0f}s)", flush=True)
    print("study complete")


if __name__ == "__main__":
    main()
