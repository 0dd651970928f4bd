"""FLOPs-constrained architecture search over FrostConv configurations.

The multi-objective reward acc * (flops/target)**w trades accuracy against
compute; with w < 0 the ratio term penalizes models above the target. The
searcher (random sampling or a small mutation-based evolutionary loop)
stands in for an RL controller: per-block choices are kernel {3,5},
expansion {3,6}, and squeeze fraction {1/4, 1/2} over a fixed stage
skeleton; every candidate trains briefly with the warm-up + boosted-QAT
pipeline and ranks by reward.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchSpec, build_frostnet
from .counts import count_flops, count_params

KERNEL_CHOICES = (3, 5)
EF_CHOICES = (3, 6)
RF_CHOICES = (4, 2)          # squeeze fractions 0.25 and 0.5

# compact stage layout for desk-scale proxy training at 32x32
PROXY_SKELETON = dict(
    stem_ch=16, stem_stride=1, head_ch=256,
    stages=[  # (out_ch, stride)
        (16, 2),
        (24, 1),
        (40, 2),
        (64, 2),
    ])


@dataclass
class SearchSpace:
    """Per-block choice sets over a fixed stage skeleton."""

    skeleton: dict = field(default_factory=lambda: dict(PROXY_SKELETON))
    kernels: tuple = KERNEL_CHOICES
    efs: tuple = EF_CHOICES
    rfs: tuple = RF_CHOICES

    @property
    def n_blocks(self):
        return len(self.skeleton["stages"])

    def sample(self, rng):
        return [(int(rng.choice(self.kernels)), int(rng.choice(self.efs)),
                 int(rng.choice(self.rfs))) for _ in range(self.n_blocks)]

    def mutate(self, config, rng):
        """Change exactly one choice of one block."""
        new = [tuple(c) for c in config]
        i = int(rng.integers(self.n_blocks))
        slot = int(rng.integers(3))
        options = (self.kernels, self.efs, self.rfs)[slot]
        current = new[i][slot]
        alternatives = [o for o in options if o != current]
        pick = alternatives[int(rng.integers(len(alternatives)))]
        row = list(new[i])
        row[slot] = pick
        new[i] = tuple(row)
        return new

    def to_arch_spec(self, config, width_mult=1.0, num_classes=10):
        sk = self.skeleton
        blocks = []
        first = True
        for (out, stride), (k, ef, rf) in zip(sk["stages"], config):
            if first:
                # keep the customary degenerate entry block
                blocks.append((k, out, 1, 1, stride))
                first = False
            else:
                blocks.append((k, out, ef, rf, stride))
        return ArchSpec(variant="searched", blocks=blocks,
                        stem_ch=sk["stem_ch"], stem_stride=sk["stem_stride"],
                        head_ch=sk["head_ch"], width_mult=width_mult,
                        num_classes=num_classes)


@dataclass
class Candidate:
    config: list
    flops: int
    params: int
    acc: float
    reward_value: float
    seed: int
    failed: bool = False
    error: str = ""

    def record(self):
        return {"config": [list(c) for c in self.config], "flops": self.flops,
                "params": self.params, "acc": self.acc,
                "reward": self.reward_value, "seed": self.seed,
                "failed": self.failed, "error": self.error}


def reward(acc, flops, tar, w):
    """acc * (flops/tar)**w; with w < 0 heavier models score lower."""
    if flops <= 0 or tar <= 0:
        raise ValueError("flops and target must be positive")
    return acc * (flops / tar) ** w


def evaluate_candidate(space, config, proxy_train, tar, w, seed, input_res=32):
    spec = space.to_arch_spec(config)
    model = build_frostnet(spec, spec.width_mult, spec.num_classes, input_res,
                           seed=seed)
    flops = count_flops(model, input_res)
    params = count_params(model)
    acc = proxy_train(spec, seed)
    return Candidate(config=config, flops=flops, params=params, acc=acc,
                     reward_value=reward(acc, flops, tar, w), seed=seed)


def search(space, budget, proxy_train, tar, w=-0.07, strategy="random",
           seed=0, population=8, input_res=32, results_path=None):
    """Sample/evolve ``budget`` configurations, rank by reward (descending).

    ``proxy_train(arch_spec, seed) -> acc`` must be deterministic under the
    seed. A failing evaluation marks the candidate failed and the search
    continues. Results optionally stream to a JSON-lines file.
    """
    if budget < 1:
        raise ValueError("search budget must be >= 1")
    if strategy not in ("random", "evolutionary"):
        raise ValueError(f"unknown strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    candidates = []

    def consider(config, idx):
        try:
            cand = evaluate_candidate(space, config, proxy_train, tar, w,
                                      seed=seed + idx, input_res=input_res)
        except Exception as exc:   # evaluator failure: record and move on
            cand = Candidate(config=config, flops=0, params=0, acc=0.0,
                             reward_value=float("-inf"), seed=seed + idx,
                             failed=True, error=str(exc))
        candidates.append(cand)
        if results_path:
            with open(results_path, "a") as f:
                f.write(json.dumps(cand.record()) + "\n")
        return cand

    if strategy == "random":
        for i in range(budget):
            consider(space.sample(rng), i)
    else:
        n_init = min(population, budget)
        for i in range(n_init):
            consider(space.sample(rng), i)
        for i in range(n_init, budget):
            alive = [c for c in candidates if not c.failed]
            if alive:
                elites = sorted(alive, key=lambda c: -c.reward_value)[:population]
                parent = elites[int(rng.integers(len(elites)))]
                child = space.mutate(parent.config, rng)
            else:
                child = space.sample(rng)
            consider(child, i)

    order = sorted(range(len(candidates)),
                   key=lambda i: (-candidates[i].reward_value, i))
    return [candidates[i] for i in order]


def default_proxy_train(train_set, test_set, epochs=3, batch_size=200,
                        lr=0.05, data_seed=3):
    """3-epoch warm-up + boosted-QAT proxy evaluator on the desk dataset."""
    from .data import epoch_batches
    from .optim import GradBoostHyper, GradBoostSGD
    from .pipeline import (convert_int8, evaluate, prepare_qat, qat_train,
                           statassist_warmup)

    def proxy(spec, seed):
        model = build_frostnet(spec, spec.width_mult, spec.num_classes, 32,
                               seed=seed)
        opt = GradBoostSGD(model.parameters(), lr=lr, momentum=0.9,
                           weight_decay=1e-4, hyper=GradBoostHyper(),
                           seed=seed + 1)

        def data_fn(e):
            return epoch_batches(train_set, batch_size, e,
                                 seed=(data_seed, seed), train=True)

        statassist_warmup(model, opt, data_fn, 1)
        prepare_qat(model)
        qat_train(model, opt, data_fn, epochs - 1, epoch_offset=1)
        convert_int8(model)
        return evaluate(model, test_set)

    return proxy
