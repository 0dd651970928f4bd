"""Command-line entry points.

Subcommands: train (FP baseline), qat (warm-up + boosted QAT + int8
conversion), eval (checkpoint accuracy), bench (fp-vs-int8 latency),
count (params/FLOPs), search (reward-ranked block search). Every
data-consuming command emits CSV metrics and rendered figures into the
run's output directory.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .config import RunConfig


def _add_config_args(p):
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--variant")
    p.add_argument("--width-mult", type=float, dest="width_mult")
    p.add_argument("--input-res", type=int, dest="input_res")
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--optimizer", choices=("sgd", "adamw"))
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--boost-prob", type=float, dest="boost_prob")
    p.add_argument("--schedule", choices=("poly", "step", "constant"))
    p.add_argument("--fp-warmup-epochs", type=int, dest="fp_warmup_epochs")
    p.add_argument("--qat-epochs", type=int, dest="qat_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--dataset-dir", dest="dataset_dir")
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--weight-observer", dest="weight_observer",
                   choices=("fresh", "moving_average"))


def _build_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for field in RunConfig.__dataclass_fields__:
        val = getattr(args, field, None)
        if val is not None:
            if field == "boost_prob":
                continue
            setattr(cfg, field, val)
    if getattr(args, "boost_prob", None) is not None:
        cfg.boost = dict(cfg.boost, boost_prob=args.boost_prob)
    return cfg


def _make_optimizer(cfg, params):
    from .optim import GradBoostAdamW, GradBoostSGD
    if cfg.optimizer == "adamw":
        return GradBoostAdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                              weight_decay=cfg.weight_decay,
                              hyper=cfg.boost_hyper(), seed=cfg.seed + 1)
    return GradBoostSGD(params, lr=cfg.lr, momentum=cfg.momentum,
                        weight_decay=cfg.weight_decay,
                        hyper=cfg.boost_hyper(), seed=cfg.seed + 1)


def _load_data(cfg):
    from .data import resolve_dataset
    root = cfg.dataset_dir or None
    if cfg.dataset_dir:
        from .data import load_cifar10
        return load_cifar10(cfg.dataset_dir)
    return resolve_dataset(root, n_train=cfg.n_train, n_test=cfg.n_test)


def _emit_run_artifacts(cfg, report, out_dir, summary):
    from .figures import gradient_health, training_curves
    from .metrics import write_metrics_csv
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.json"))
    write_metrics_csv(report, os.path.join(out_dir, "metrics.csv"), summary)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump({"report": report.to_dict(), "summary": summary}, f, indent=1)
    if report.records:
        training_curves(report, os.path.join(out_dir, "training.png"))
        gradient_health(report, os.path.join(out_dir, "gradient_health.png"))


def cmd_train(args):
    cfg = _build_config(args).validate("train")
    from .arch import build_frostnet
    from .checkpoint import save_checkpoint
    from .data import epoch_batches
    from .pipeline import TrainRunReport, evaluate, statassist_warmup
    train, test = _load_data(cfg)
    model = build_frostnet(cfg.variant, cfg.width_mult, cfg.num_classes,
                           cfg.input_res, seed=cfg.seed)
    opt = _make_optimizer(cfg, model.parameters())

    def data_fn(e):
        return epoch_batches(train, cfg.batch_size, e,
                             seed=(cfg.data_seed, cfg.seed), train=True,
                             augment_data=cfg.augment)

    report = TrainRunReport(meta={"command": "train", "data": train.source})
    statassist_warmup(model, opt, data_fn, cfg.total_epochs, report,
                      lr_fn=cfg.lr_at)
    acc = evaluate(model, test, cfg.batch_size)
    summary = {"fp_acc": f"{acc:.4f}", "epochs": cfg.total_epochs,
               "data": train.source}
    _emit_run_artifacts(cfg, report, cfg.out_dir, summary)
    save_checkpoint(model, os.path.join(cfg.out_dir, "checkpoint_fp"))
    print(f"fp top-1 {acc:.4f} | artifacts in {cfg.out_dir}")
    return 0


def cmd_qat(args):
    cfg = _build_config(args).validate("qat")
    from .arch import build_frostnet
    from .checkpoint import save_checkpoint, save_for_int8
    from .data import epoch_batches
    from .pipeline import (TrainRunReport, convert_int8, evaluate,
                           prepare_qat, qat_train, statassist_warmup)
    train, test = _load_data(cfg)
    model = build_frostnet(cfg.variant, cfg.width_mult, cfg.num_classes,
                           cfg.input_res, seed=cfg.seed)
    opt = _make_optimizer(cfg, model.parameters())

    def data_fn(e):
        return epoch_batches(train, cfg.batch_size, e,
                             seed=(cfg.data_seed, cfg.seed), train=True,
                             augment_data=cfg.augment)

    report = TrainRunReport(meta={"command": "qat", "data": train.source})
    statassist_warmup(model, opt, data_fn, cfg.fp_warmup_epochs, report,
                      lr_fn=cfg.lr_at)
    prepare_qat(model, averaging_constant=cfg.averaging_constant,
                observer_mode=cfg.observer_mode,
                weight_observer=cfg.weight_observer)
    qat_train(model, opt, data_fn, cfg.qat_epochs, report, lr_fn=cfg.lr_at,
              epoch_offset=cfg.fp_warmup_epochs)
    fq_acc = evaluate(model, test, cfg.batch_size)
    save_checkpoint(model, os.path.join(cfg.out_dir, "checkpoint_fakequant"))
    save_for_int8(model, os.path.join(cfg.out_dir, "checkpoint_int8"))
    convert_int8(model)
    int8_acc = evaluate(model, test, cfg.batch_size)
    summary = {"fq_acc": f"{fq_acc:.4f}", "int8_acc": f"{int8_acc:.4f}",
               "epochs": cfg.total_epochs, "data": train.source}
    _emit_run_artifacts(cfg, report, cfg.out_dir, summary)
    print(f"fake-quant top-1 {fq_acc:.4f} | int8 top-1 {int8_acc:.4f} | "
          f"artifacts in {cfg.out_dir}")
    return 0


def cmd_eval(args):
    cfg = _build_config(args)
    from .checkpoint import load_checkpoint
    from .pipeline import evaluate
    model, manifest = load_checkpoint(args.checkpoint,
                                      expect_mode=args.expect_mode)
    _, test = _load_data(cfg)
    acc = evaluate(model, test, cfg.batch_size)
    print(f"{manifest['mode']} top-1 {acc:.4f} on {test.source}")
    return 0


def cmd_bench(args):
    from .bench import run_block_benchmark
    from .figures import bench_comparison
    rep = run_block_benchmark(depth=args.depth, channels=args.channels,
                              input_res=args.input_res,
                              batch_size=args.batch_size,
                              threads=args.threads, runs=args.runs)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "bench.json"), "w") as f:
        json.dump(rep.to_dict(), f, indent=1)
    rows = ["name,fp_ms,int8_ms,reduction_rate,unstable"]
    for e in rep.entries:
        rows.append(f"{e['name']},{e['fp_ms']:.3f},{e['int8_ms']:.3f},"
                    f"{e['reduction_rate']:.4f},{int(e['unstable'])}")
        print(f"{e['name']:10s} fp {e['fp_ms']:8.2f} ms | int8 "
              f"{e['int8_ms']:8.2f} ms | reduction {100 * e['reduction_rate']:6.2f}%")
    with open(os.path.join(args.out_dir, "bench.csv"), "w") as f:
        f.write("\n".join(rows) + "\n")
    bench_comparison(rep, os.path.join(args.out_dir, "bench.png"))
    print(f"artifacts in {args.out_dir}")
    return 0


def cmd_count(args):
    cfg = _build_config(args)
    from .arch import ArchSpec, build_frostnet
    from .counts import count_flops, count_params
    variant = cfg.variant
    if variant.endswith(".json") and os.path.exists(variant):
        variant = ArchSpec.load(variant)
    is_imagenet_scale = isinstance(variant, str) and variant in (
        "base", "large", "small")
    res = (args.input_res or cfg.input_res) if args.input_res else (
        224 if is_imagenet_scale else cfg.input_res)
    classes = args.num_classes or (1000 if is_imagenet_scale else cfg.num_classes)
    model = build_frostnet(variant, cfg.width_mult, classes, res)
    p, f = count_params(model), count_flops(model, res)
    name = variant if isinstance(variant, str) else variant.variant
    print(f"{name} x{cfg.width_mult} @{res}: {p / 1e6:.3f}M params, "
          f"{f / 1e6:.1f}M MACs")
    return 0


def cmd_search(args):
    cfg = _build_config(args)
    from .search import SearchSpace, default_proxy_train, search
    train, test = _load_data(cfg)
    if args.subset:
        train = train.subset(args.subset, seed=cfg.seed)
    space = SearchSpace()
    proxy = default_proxy_train(train, test, epochs=args.proxy_epochs,
                                batch_size=cfg.batch_size, lr=cfg.lr,
                                data_seed=cfg.data_seed)
    os.makedirs(args.out_dir, exist_ok=True)
    results_path = os.path.join(args.out_dir, "search_results.jsonl")
    if os.path.exists(results_path):
        os.remove(results_path)
    ranked = search(space, args.budget, proxy, tar=args.tar, w=args.w,
                    strategy=args.strategy, seed=cfg.seed,
                    results_path=results_path)
    print("rank  reward    acc     MFLOPs  config")
    for i, c in enumerate(ranked):
        tag = " FAILED" if c.failed else ""
        print(f"{i:4d}  {c.reward_value:7.4f}  {c.acc:.4f}  "
              f"{c.flops / 1e6:7.2f}  {c.config}{tag}")
    with open(os.path.join(args.out_dir, "search_summary.json"), "w") as f:
        json.dump([c.record() for c in ranked], f, indent=1)
    print(f"artifacts in {args.out_dir}")
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(prog="frostnet", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    for name, fn in (("train", cmd_train), ("qat", cmd_qat)):
        p = sub.add_parser(name)
        _add_config_args(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--expect-mode", dest="expect_mode",
                   choices=("fp", "fake_quant", "int8"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench")
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--input-res", type=int, dest="input_res", default=56)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=2)
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--runs", type=int, default=40)
    p.add_argument("--out-dir", dest="out_dir", default="runs/bench")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("count")
    _add_config_args(p)
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("search")
    _add_config_args(p)
    p.add_argument("--budget", type=int, default=8)
    p.add_argument("--strategy", choices=("random", "evolutionary"),
                   default="random")
    p.add_argument("--tar", type=int, default=3_000_000)
    p.add_argument("--w", type=float, default=-0.07)
    p.add_argument("--proxy-epochs", type=int, dest="proxy_epochs", default=3)
    p.add_argument("--subset", type=int, default=5000)
    p.set_defaults(fn=cmd_search)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
