"""Run configuration: everything a reproducible run needs, in one record.

A config round-trips through JSON; CLI flags mirror its fields and
override file values. A run is reproducible from config + seed.
"""

import json
import os
from dataclasses import dataclass, field, asdict

from .optim import GradBoostHyper


@dataclass
class RunConfig:
    # architecture
    variant: str = "cifar"            # base|large|small|cifar or arch-file path
    width_mult: float = 1.0
    num_classes: int = 10
    input_res: int = 32
    # optimizer
    optimizer: str = "sgd"            # sgd | adamw
    lr: float = 0.05
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    boost: dict = field(default_factory=lambda: dict(
        boost_prob=0.5, gamma1=0.999, gamma2=0.01, gamma3=0.9999,
        decay_mode="power", clamp_mode="sign_preserving"))
    # schedule
    schedule: str = "poly"            # poly | step | constant
    milestones: tuple = ()
    # epochs
    fp_warmup_epochs: int = 1
    qat_epochs: int = 29
    batch_size: int = 200
    # quantization observers
    averaging_constant: float = 0.01
    observer_mode: str = "moving_average"
    weight_observer: str = "moving_average"
    # data
    dataset_dir: str = ""             # empty -> env var or synthetic fallback
    n_train: int = 50000
    n_test: int = 10000
    augment: bool = True
    # run
    seed: int = 0
    data_seed: int = 3
    out_dir: str = "runs/latest"

    def boost_hyper(self):
        return GradBoostHyper(**self.boost)

    @property
    def total_epochs(self):
        return self.fp_warmup_epochs + self.qat_epochs

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.betas = tuple(cfg.betas)
        cfg.milestones = tuple(cfg.milestones)
        return cfg

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def validate(self, command=None):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("poly", "step", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if command == "qat" and (self.fp_warmup_epochs < 1 or self.qat_epochs < 1):
            raise ValueError(
                "the quantization-aware pipeline needs fp_warmup_epochs >= 1 "
                "and qat_epochs >= 1")
        if command == "train" and self.total_epochs < 1:
            raise ValueError("training needs at least one epoch")
        return self

    def lr_at(self, epoch):
        from .optim import lr_schedule
        total = max(self.total_epochs, 1)
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "step":
            return lr_schedule("step", epoch, total, self.lr, self.milestones)
        return lr_schedule("poly", epoch, total, self.lr)
