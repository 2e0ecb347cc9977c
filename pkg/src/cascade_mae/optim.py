from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ParamStore


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass
class OptimizerState:
    hp: AdamConfig
    m: ParamStore = field(default_factory=dict)
    v: ParamStore = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.hp,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
        )


def init_optimizer(params: ParamStore, hp: AdamConfig | None = None) -> OptimizerState:
    hp = hp or AdamConfig()
    return OptimizerState(
        hp,
        {k: np.zeros_like(v) for k, v in params.items()},
        {k: np.zeros_like(v) for k, v in params.items()},
    )


def decays(name: str, value: np.ndarray) -> bool:
    # matrices only; biases, norms, positional tables and the mask token are exempt
    return value.ndim >= 2 and not name.endswith("pos")


def adam_update(params: ParamStore, grads: ParamStore, state: OptimizerState):
    """One AdamW step with decoupled weight decay. Returns new (params, state)."""
    hp = state.hp
    t = state.step + 1
    bc1 = 1.0 - hp.beta1**t
    bc2 = 1.0 - hp.beta2**t
    if set(state.m) != set(params):
        raise KeyError("optimizer state does not match parameter names")
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = hp.beta1 * state.m[name] + (1 - hp.beta1) * g
        v = hp.beta2 * state.v[name] + (1 - hp.beta2) * g * g
        step = (m / bc1) / (np.sqrt(v / bc2) + hp.eps)
        if hp.weight_decay and decays(name, p):
            p = p * (1 - hp.lr * hp.weight_decay)
        new_params[name] = (p - hp.lr * step).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(hp, new_m, new_v, t)
