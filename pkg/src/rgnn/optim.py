"""Adam with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import DimensionError, Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor | np.ndarray],
              state: AdamState, lr: float, clip_norm: float | None = None) -> AdamState:
    """One in-place update of every parameter; ``clip_norm`` rescales the global gradient norm."""
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for parameters: {sorted(missing)}")
    g_all = {}
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        g_all[name] = g
    if clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in g_all.values()))
        if norm > clip_norm:
            g_all = {k: g * (clip_norm / norm) for k, g in g_all.items()}

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = g_all[name]
        if name not in state.m:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state
