"""Comma-separated metrics emission.

One row per epoch: epoch, phase, loss, acc, lr, then median |grad| per
stage group. Wall-clock stays out of the CSV so identical runs produce
bitwise-identical files; timing lives in the JSON report instead.
"""

import os


def metrics_rows(report):
    """(header, rows) for a TrainRunReport."""
    stages = []
    for rec in report.records:
        for s in rec.grad_stats:
            if s not in stages:
                stages.append(s)
    header = ["epoch", "phase", "loss", "acc", "lr"]
    header += [f"median_grad_{s}" for s in stages]
    header += [f"zero_frac_{s}" for s in stages]
    rows = []
    for rec in report.records:
        row = [str(rec.epoch), rec.phase, f"{rec.loss:.6f}", f"{rec.acc:.6f}",
               f"{rec.lr:.8f}"]
        row += [f"{rec.grad_stats[s]['median_abs']:.6e}" if s in rec.grad_stats
                else "" for s in stages]
        row += [f"{rec.grad_stats[s]['zero_fraction']:.6f}" if s in rec.grad_stats
                else "" for s in stages]
        rows.append(row)
    return header, rows


def write_metrics_csv(report, path, summary=None):
    """Write per-epoch rows plus a final summary record."""
    header, rows = metrics_rows(report)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")
        if summary:
            pairs = ";".join(f"{k}={v}" for k, v in summary.items())
            f.write(f"summary,,,,,{pairs}\n")
    return path
