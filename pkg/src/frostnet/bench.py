"""FP-vs-INT8 forward latency benchmark.

Protocol: 5 warm-up forwards, then at least 30 timed runs; the median is
reported together with the relative interquartile spread (flagged when it
exceeds 10%). The int8 path runs the converted integer graph; the fp path
runs the same architecture's unfused eval-mode graph. The block-type
comparison pits a FrostConv stack against an MBConv stack with
squeeze-and-excite, whose gating cannot fuse.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .arch import GraphBuilder, add_frost_conv, add_mbconv, FrostBlockSpec
from .graph import ConvNode, FlattenNode, GlobalAvgPoolNode
from .pipeline import calibrate, convert_int8, evaluate, prepare_qat
from .tensor import Parameter, no_grad


@dataclass
class BenchReport:
    thread_count: int
    input_res: int
    batch_size: int
    warmup_runs: int
    timed_runs: int
    entries: list = field(default_factory=list)

    def add(self, name, fp_stats, int8_stats):
        fp_ms, fp_spread = fp_stats
        q_ms, q_spread = int8_stats
        self.entries.append({
            "name": name,
            "fp_ms": fp_ms,
            "int8_ms": q_ms,
            "reduction_rate": (fp_ms - q_ms) / fp_ms,
            "fp_iqr_rel": fp_spread,
            "int8_iqr_rel": q_spread,
            "unstable": max(fp_spread, q_spread) > 0.10,
        })

    def to_dict(self):
        return {"thread_count": self.thread_count, "input_res": self.input_res,
                "batch_size": self.batch_size, "warmup_runs": self.warmup_runs,
                "timed_runs": self.timed_runs, "entries": self.entries}


def set_thread_count(n):
    """Pin BLAS kernel threads, clamped to the machine's cores (spinning
    surplus threads on an oversubscribed box serializes everything).
    Returns the effective count."""
    import os
    eff = max(1, min(n, os.cpu_count() or 1))
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(eff)
    except ImportError:
        os.environ["OPENBLAS_NUM_THREADS"] = str(eff)
    return eff


def build_block_stack(block="frost", depth=10, channels=64, input_res=56,
                      num_classes=10, seed=0):
    """Stem + ``depth`` identical-width blocks + tiny classifier head."""
    b = GraphBuilder(seed, meta={"input_res": input_res,
                                 "arch": {"variant": f"{block}-stack",
                                          "depth": depth,
                                          "channels": channels}})
    x = b.conv_bn_act("stem", "input", 3, channels, 3, stride=2)
    for i in range(depth):
        kernel = 5 if i % 2 else 3
        if block == "frost":
            spec = FrostBlockSpec(channels, channels, kernel, 3, 4, 1)
            x = add_frost_conv(b, f"block{i}", x, spec)
        else:
            x = add_mbconv(b, f"block{i}", x, channels, channels, kernel, 3,
                           1, use_se=True)
    x = b.g.add(GlobalAvgPoolNode("gap", [x]))
    wc = Parameter((b.rng.standard_normal((num_classes, channels, 1, 1)) * 0.01
                    ).astype(np.float32), "classifier.weight")
    bc = Parameter(np.zeros(num_classes, np.float32), "classifier.bias")
    x = b.g.add(ConvNode("classifier", [x], wc, bc, is_classifier=True))
    b.g.add(FlattenNode("logits", [x]))
    return b.g


def _timed(fn, warmup, runs):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    samples = np.sort(np.asarray(samples))
    median = float(np.median(samples))
    q1, q3 = np.percentile(samples, (25, 75))
    return median, float((q3 - q1) / median)


def bench_pair(fp_model, int8_model, input_res, batch_size=4, warmup=5,
               runs=30, rng=None):
    """Median latencies of the fp and converted graphs on one input."""
    rng = rng or np.random.default_rng(0)
    x = rng.standard_normal((batch_size, 3, input_res, input_res)).astype(np.float32)

    def run_fp():
        with no_grad():
            fp_model.forward(x, training=False)

    def run_int8():
        int8_model.forward(x)

    return _timed(run_fp, warmup, runs), _timed(run_int8, warmup, runs)


def calibrated_int8_copy(build_fn, input_res, calib_batches=8, batch_size=8,
                         seed=0):
    """Build, calibrate on random data, and lower a fresh copy to int8."""
    model = build_fn()
    prepare_qat(model)
    rng = np.random.default_rng(seed)

    def stream(_epoch):
        for _ in range(calib_batches):
            yield (rng.standard_normal((batch_size, 3, input_res, input_res))
                   .astype(np.float32), None)

    calibrate(model, stream, calib_batches)
    return convert_int8(model)


def run_block_benchmark(depth=10, channels=64, input_res=56, batch_size=2,
                        threads=4, warmup=5, runs=40, seed=0):
    """The FrostConv-vs-MBConv(+SE) latency comparison."""
    thread_count = set_thread_count(threads)
    report = BenchReport(thread_count=thread_count, input_res=input_res,
                         batch_size=batch_size, warmup_runs=warmup,
                         timed_runs=runs)
    for name in ("frost", "mbconv_se"):
        block = "frost" if name == "frost" else "mbconv"

        def build():
            return build_block_stack(block, depth, channels, input_res,
                                     seed=seed)

        fp_model = build()
        int8_model = calibrated_int8_copy(build, input_res, seed=seed)
        fp_stats, int8_stats = bench_pair(fp_model, int8_model, input_res,
                                          batch_size, warmup, runs,
                                          rng=np.random.default_rng(seed + 7))
        report.add(name, fp_stats, int8_stats)
    return report
