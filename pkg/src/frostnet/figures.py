"""Matplotlib figure rendering for run reports and benchmarks.

Figures land next to the CSV metrics. Import stays lazy and the backend
headless so library use never requires a display.
"""

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

plt.rcParams.update({
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "legend.fontsize": 9,
})


def _save(fig, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def training_curves(report, path):
    """Loss and accuracy per epoch, with the warm-up phase marked."""
    epochs = [r.epoch for r in report.records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.plot(epochs, [r.loss for r in report.records], marker=".")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.plot(epochs, [r.acc for r in report.records], marker=".", color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("train top-1")
    for ax in (ax1, ax2):
        for r in report.records:
            if r.phase == "fp":
                ax.axvspan(r.epoch - 0.5, r.epoch + 0.5, color="tab:orange",
                           alpha=0.12, lw=0)
    fig.suptitle("training (shaded: full-precision warm-up)")
    return _save(fig, path)


def gradient_health(report, path, stages=None):
    """Per-stage gradient zero-fraction across epochs."""
    if not report.records:
        raise ValueError("empty report")
    all_stages = stages or sorted({s for r in report.records
                                   for s in r.grad_stats})
    fig, ax = plt.subplots()
    for s in all_stages:
        xs = [r.epoch for r in report.records if s in r.grad_stats]
        ys = [r.grad_stats[s]["zero_fraction"] for r in report.records
              if s in r.grad_stats]
        ax.plot(xs, ys, marker=".", label=s)
    ax.set_xlabel("epoch")
    ax.set_ylabel("gradient zero-fraction (|g| < 1e-8)")
    ax.legend(ncol=3)
    return _save(fig, path)


def bench_comparison(bench_report, path):
    """FP vs INT8 latency bars with reduction-rate labels."""
    names = [e["name"] for e in bench_report.entries]
    fp = [e["fp_ms"] for e in bench_report.entries]
    q = [e["int8_ms"] for e in bench_report.entries]
    xs = range(len(names))
    fig, ax = plt.subplots()
    ax.bar([x - 0.18 for x in xs], fp, width=0.36, label="float32")
    ax.bar([x + 0.18 for x in xs], q, width=0.36, label="int8")
    for x, e in zip(xs, bench_report.entries):
        ax.annotate(f"{100 * e['reduction_rate']:.1f}%",
                    (x, max(e["fp_ms"], e["int8_ms"])),
                    ha="center", va="bottom", fontsize=9)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names)
    ax.set_ylabel("median forward latency (ms)")
    ax.legend()
    ax.set_title("latency reduction from int8 lowering")
    return _save(fig, path)


def study_comparison(study, path):
    """Per-seed final accuracies of the three study arms."""
    arms = ("fp", "statassist", "cold")
    seeds = sorted({r["seed"] for r in study["runs"]})
    fig, ax = plt.subplots()
    width = 0.25
    for i, arm in enumerate(arms):
        xs, ys = [], []
        for j, seed in enumerate(seeds):
            for r in study["runs"]:
                if r["arm"] == arm and r["seed"] == seed:
                    xs.append(j + (i - 1) * width)
                    ys.append(r.get("fp_acc") or r.get("int8_acc"))
        label = {"fp": "FP baseline", "statassist": "StatAssist+boost int8",
                 "cold": "cold scratch int8"}[arm]
        ax.bar(xs, ys, width=width, label=label)
    ax.set_xticks(range(len(seeds)))
    ax.set_xticklabels([f"seed {s}" for s in seeds])
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, path)
