from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, ContractError
from .nn import ParamStore


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        if not self.eps > 0:
            raise ConfigurationError("Adam eps must be positive")


class Adam:
    """Adam with bias correction.  Moment buffers live here, keyed by parameter name."""

    def __init__(self, cfg: AdamConfig | None = None):
        self.cfg = cfg or AdamConfig()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, lr: float | None = None) -> None:
        cfg = self.cfg
        lr = cfg.lr if lr is None else lr
        missing = [n for n in store.params if n not in store.grads]
        if missing:
            raise ContractError(f"no gradient for parameters {missing}")
        store.step_count += 1
        t = store.step_count
        c1 = 1.0 - cfg.beta1 ** t
        c2 = 1.0 - cfg.beta2 ** t
        for name, p in store.items():
            g = store.grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        store.zero_grad()


def adam_step(store: ParamStore, cfg: AdamConfig, state: Adam | None = None) -> Adam:
    """Apply one Adam update to ``store``; returns the optimiser state to reuse."""
    state = state or Adam(cfg)
    state.step(store)
    return state


def cosine_lr(base: float, step: int, total: int, warmup: int) -> float:
    """Linear warm-up followed by cosine decay to zero."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    return 0.5 * base * (1.0 + math.cos(math.pi * min(1.0, (step - warmup) / span)))
