"""Adam with the AMSGrad correction and a warm-then-cosine learning-rate schedule."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import DomainError, NumericError


@dataclass
class OptimizerState:
    """First/second moments per parameter name plus the running max of the
    bias-corrected second moment used by AMSGrad."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    amsgrad: bool = True
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_max: dict = field(default_factory=dict)

    def init_for(self, params):
        for name, value in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
                self.v_max[name] = np.zeros_like(value)
        return self

    def hyperparameters(self):
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "amsgrad": self.amsgrad, "step": self.step}


def adam_step(params, grads, state, lr):
    """Update ``params`` (name -> array) in place from ``grads``.

    The AMSGrad running max is taken over bias-corrected second moments, so a
    single unit gradient on the first step moves a parameter by ``-lr/(1+eps)``.
    """
    if lr <= 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if params[name].shape != g.shape:
            raise DomainError(f"gradient shape {g.shape} does not match "
                              f"parameter {name!r} shape {params[name].shape}")
    state.init_for(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        v_hat = v / c2
        if state.amsgrad:
            np.maximum(state.v_max[name], v_hat, out=state.v_max[name])
            v_hat = state.v_max[name]
        p -= (lr * (m / c1) / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    """Constant ``base_rate`` for ``warm_epochs``, then cosine decay to ``min_rate``
    at ``total_epochs``."""

    base_rate: float
    warm_epochs: int
    total_epochs: int
    min_rate: float = 0.0

    def __post_init__(self):
        if not 0 <= self.min_rate <= self.base_rate:
            raise DomainError("need 0 <= min_rate <= base_rate")
        if not 0 <= self.warm_epochs <= self.total_epochs:
            raise DomainError("need 0 <= warm_epochs <= total_epochs")


def lr_at(schedule, epoch):
    if not 0 <= epoch <= schedule.total_epochs:
        raise DomainError(
            f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch < schedule.warm_epochs:
        return schedule.base_rate
    span = schedule.total_epochs - schedule.warm_epochs
    if span == 0:
        return schedule.base_rate
    progress = (epoch - schedule.warm_epochs) / span
    return schedule.min_rate + 0.5 * (schedule.base_rate - schedule.min_rate) * (
        1 + math.cos(math.pi * progress))
