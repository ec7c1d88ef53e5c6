"""Adam with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch
from .plnet import ModelWeights


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    hyper: AdamHyper = AdamHyper()

    @classmethod
    def for_weights(cls, w: ModelWeights, hyper: AdamHyper = AdamHyper()) -> OptimizerState:
        zeros = {k: np.zeros_like(p) for k, p in w.params.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, 0, hyper)


def adam_step(
    w: ModelWeights, grads: dict[str, np.ndarray], state: OptimizerState, hyper: AdamHyper | None = None
) -> tuple[ModelWeights, OptimizerState]:
    """One Adam update. Returns new weights and state; the inputs are left untouched."""
    hyper = hyper or state.hyper
    t = state.step + 1
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, param in w.params.items():
        g = grads[name]
        if g.shape != param.shape:
            raise ShapeMismatch(f"{name}: gradient shape {g.shape} != parameter shape {param.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * (g * g)
        update = hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        new_params[name] = (param - update).astype(param.dtype, copy=False)
        new_m[name] = m.astype(param.dtype, copy=False)
        new_v[name] = v.astype(param.dtype, copy=False)
    new_w = ModelWeights(w.spec, new_params, w.seed, w.version)
    return new_w, OptimizerState(new_m, new_v, t, hyper)
