"""SGD-with-momentum and AdamW with stochastic gradient boosting.

Gradient boosting tracks per-parameter exponential-moving gradient
extremes (initialized to max=1, min=0); their difference sets the scale
of Laplace noise that is sign-matched to the gradient, clamped, decayed
over time, and added to a random subset of gradient elements. With
boost_prob = 0 (or boosting disabled) both optimizers reduce bit-exactly
to their vanilla forms.

The momentum update follows m <- beta1*m + eta*alpha*g with decoupled
weight decay on the parameter step; AdamW keeps weight decay fully
decoupled (no fold into the gradient).
"""

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["GradBoostHyper", "GradBoostState", "update_laplace_scale",
           "gradboost_transform", "sgd_step", "adamw_step", "GradBoostSGD",
           "GradBoostAdamW", "lr_schedule"]


@dataclass
class GradBoostHyper:
    """Boosting knobs. Defaults are explicit non-published choices."""

    gamma1: float = 0.999        # EMA decay for the gradient extremes
    gamma2: float = 0.01         # noise clamp bound
    gamma3: float = 0.9999       # per-step noise decay base
    boost_prob: float = 0.5      # per-element selection probability
    decay_mode: str = "power"            # "power" | "one_minus_power"
    clamp_mode: str = "sign_preserving"  # "sign_preserving" | "literal"
    per_tensor_coin: bool = False        # one coin per tensor per step

    def __post_init__(self):
        if not 0.0 < self.gamma1 < 1.0:
            raise ValueError("gamma1 must lie in (0, 1)")
        if self.gamma2 <= 0.0:
            raise ValueError("gamma2 must be positive")
        if not 0.0 < self.gamma3 < 1.0:
            raise ValueError("gamma3 must lie in (0, 1)")
        if not 0.0 <= self.boost_prob <= 1.0:
            raise ValueError("boost_prob must lie in [0, 1]")
        if self.decay_mode not in ("power", "one_minus_power"):
            raise ValueError(f"unknown decay_mode {self.decay_mode!r}")
        if self.clamp_mode not in ("sign_preserving", "literal"):
            raise ValueError(f"unknown clamp_mode {self.clamp_mode!r}")

    def decay(self, t):
        p = self.gamma3 ** t
        return p if self.decay_mode == "power" else 1.0 - p


@dataclass
class GradBoostState:
    """Per-parameter optimizer state."""

    m: np.ndarray = None         # first moment
    v: np.ndarray = None         # second moment (AdamW only)
    em_max: float = 1.0          # exponential-moving gradient max
    em_min: float = 0.0          # exponential-moving gradient min
    t: int = 0

    @classmethod
    def for_param(cls, param, second_moment=False):
        m = np.zeros_like(param.data)
        v = np.zeros_like(param.data) if second_moment else None
        return cls(m=m, v=v)


def update_laplace_scale(state, g, gamma1=0.999):
    """Advance the moving extremes with gradient g; returns b = max - min.

    em_max <- g1*em_max + (1-g1)*max(em_max, max(g)) and symmetrically for
    the minimum, so em_max never sinks below its running value faster than
    the EMA allows and b_t stays non-negative.
    """
    gmax = float(np.max(g))
    gmin = float(np.min(g))
    state.em_max = gamma1 * state.em_max + (1.0 - gamma1) * max(state.em_max, gmax)
    state.em_min = gamma1 * state.em_min + (1.0 - gamma1) * min(state.em_min, gmin)
    return state.em_max - state.em_min


def gradboost_transform(g, b_t, hyper, t, rng):
    """Return g plus sign-matched, clamped, decayed Laplace noise on a
    random element subset; g itself is not modified."""
    if b_t < 0:
        raise ValueError("Laplace scale must be non-negative")
    if hyper.boost_prob == 0.0:
        return g
    if hyper.per_tensor_coin:
        if rng.random() >= hyper.boost_prob:
            return g
        mask = True
    else:
        mask = rng.random(g.shape) < hyper.boost_prob
    psi = rng.laplace(0.0, b_t, g.shape) if b_t > 0 else np.zeros(g.shape)
    sign = np.sign(g)
    if hyper.clamp_mode == "sign_preserving":
        psi = sign * np.minimum(np.abs(psi), hyper.gamma2)
    else:
        psi = sign * np.abs(psi)
        psi = np.minimum(np.maximum(psi, 0.0), hyper.gamma2)
    out = g + np.where(mask, hyper.decay(t) * psi, 0.0)
    return out.astype(g.dtype, copy=False)


def sgd_step(param, grad, state, lr, momentum, weight_decay, hyper,
             schedule_mult=1.0, rng=None, boost=True):
    """One momentum-SGD update; L2 folds into the gradient and a decoupled
    decay term additionally scales the parameter."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.t += 1
    g = grad if weight_decay == 0.0 else grad + weight_decay * param.data
    if boost and hyper is not None and hyper.boost_prob > 0.0:
        b = update_laplace_scale(state, g, hyper.gamma1)
        g = gradboost_transform(g, b, hyper, state.t, rng)
    elif hyper is not None:
        update_laplace_scale(state, g, hyper.gamma1)
    state.m *= momentum
    state.m += (schedule_mult * lr) * g
    if weight_decay != 0.0:
        # decoupled term uses the pre-update parameter value
        decay_term = (schedule_mult * weight_decay) * param.data
        param.data -= state.m
        param.data -= decay_term
    else:
        param.data -= state.m


def adamw_step(param, grad, state, lr, beta1, beta2, eps, weight_decay,
               hyper, schedule_mult=1.0, rng=None, boost=True):
    """One AdamW update with bias-corrected moments and fully decoupled
    weight decay."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.t += 1
    g = grad
    if boost and hyper is not None and hyper.boost_prob > 0.0:
        b = update_laplace_scale(state, g, hyper.gamma1)
        g = gradboost_transform(g, b, hyper, state.t, rng)
    elif hyper is not None:
        update_laplace_scale(state, g, hyper.gamma1)
    state.m *= beta1
    state.m += (1.0 - beta1) * g
    state.v *= beta2
    state.v += (1.0 - beta2) * np.square(g)
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    step = lr * m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay != 0.0:
        step = step + weight_decay * param.data
    param.data -= schedule_mult * step


class _BoostOptimizer:
    second_moment = False

    def __init__(self, params, lr, weight_decay=0.0, hyper=None, seed=0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.hyper = hyper if hyper is not None else GradBoostHyper()
        self.boost_enabled = True
        self.states = [GradBoostState.for_param(p, self.second_moment)
                       for p in self.params]
        seqs = np.random.SeedSequence(seed).spawn(len(self.params))
        self.rngs = [np.random.default_rng(s) for s in seqs]

    def set_boost(self, enabled):
        self.boost_enabled = bool(enabled)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_for(self, param):
        return self.states[self.params.index(param)]

    def step(self, schedule_mult=1.0):
        for p, st, rng in zip(self.params, self.states, self.rngs):
            if p.grad is None:
                continue
            self._update(p, p.grad, st, rng, schedule_mult)

    def _update(self, p, g, st, rng, mult):
        raise NotImplementedError


class GradBoostSGD(_BoostOptimizer):
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0, hyper=None,
                 seed=0):
        super().__init__(params, lr, weight_decay, hyper, seed)
        self.momentum = momentum

    def _update(self, p, g, st, rng, mult):
        sgd_step(p, g, st, self.lr, self.momentum, self.weight_decay,
                 self.hyper, mult, rng, self.boost_enabled)


class GradBoostAdamW(_BoostOptimizer):
    second_moment = True

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, hyper=None, seed=0):
        super().__init__(params, lr, weight_decay, hyper, seed)
        self.betas = betas
        self.eps = eps

    def _update(self, p, g, st, rng, mult):
        adamw_step(p, g, st, self.lr, self.betas[0], self.betas[1], self.eps,
                   self.weight_decay, self.hyper, mult, rng,
                   self.boost_enabled)


def lr_schedule(kind, t, total, base_lr, milestones=(), power=0.9, gamma=0.1):
    """Learning-rate value at step/epoch t.

    "step" multiplies base_lr by ``gamma`` at each configured milestone;
    "poly" follows base_lr * (1 - t/total)**power.
    """
    if not 0 <= t <= total:
        raise ValueError(f"t={t} outside [0, {total}]")
    if kind == "step":
        drops = sum(1 for m in milestones if t >= m)
        return base_lr * gamma ** drops
    if kind == "poly":
        return base_lr * (1.0 - t / total) ** power
    raise ValueError(f"unknown schedule kind {kind!r}")
