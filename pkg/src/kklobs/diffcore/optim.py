"""Adam, global-norm gradient clipping and the two LR schedules used in training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients by ``max_norm / g`` when the joint L2 norm g exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(np.vdot(v, v)) for v in grads.values()))
    if total <= max_norm:
        return dict(grads)
    s = max_norm / total
    return {k: s * v for k, v in grads.items()}


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(v, v)) for v in grads.values()))


@dataclass
class CosineSchedule:
    """lr(e) = lr_min + (lr0 - lr_min) * (1 + cos(pi e / E)) / 2."""

    lr0: float
    total_epochs: int
    lr_min: float = 1e-6

    def lr(self, epoch: int) -> float:
        e = min(max(epoch, 0), self.total_epochs)
        return self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + math.cos(math.pi * e / self.total_epochs))


@dataclass
class PlateauSchedule:
    """Multiply lr by ``factor`` when the monitored loss has not improved
    for more than ``patience`` consecutive steps."""

    lr0: float
    factor: float = 0.5
    patience: int = 10
    lr_min: float = 1e-6
    current: float = field(init=False)
    best: float = field(default=math.inf, init=False)
    bad: int = field(default=0, init=False)

    def __post_init__(self):
        self.current = self.lr0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad > self.patience:
                self.current = max(self.current * self.factor, self.lr_min)
                self.bad = 0
        return self.current


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus a step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, np.ndarray], lr: float, **kw) -> "AdamState":
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        st = cls(lr=lr, **kw)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One Adam update; mutates ``state`` and returns the new parameter map."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {k!r}")
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        out[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out
