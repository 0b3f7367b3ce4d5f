"""Adam and the cyclical triangular learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeMismatch


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, weights: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in weights.items()},
            v={k: np.zeros_like(a) for k, a in weights.items()},
            **kw,
        )


def adam_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``weights`` and ``state``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, g in grads.items():
        p = weights[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeMismatch(f"adam: {name} param {p.shape}, grad {g.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class CyclicLRSpec:
    lr_min: float = 1e-4
    lr_max: float = 0.01
    cycle_epochs: float = 60

    def __post_init__(self):
        if not (0 < self.lr_min <= self.lr_max) or self.cycle_epochs <= 0:
            raise ConfigError(f"invalid cyclic schedule {self}")


def cyclic_lr(epoch_progress: float, spec: CyclicLRSpec) -> float:
    """Triangular wave starting at lr_min, peaking at lr_max mid-cycle."""
    if epoch_progress < 0:
        raise ValueError("epoch_progress must be >= 0")
    phase = epoch_progress / spec.cycle_epochs
    frac = phase - math.floor(phase)
    return spec.lr_min + (spec.lr_max - spec.lr_min) * (1.0 - abs(2.0 * frac - 1.0))
