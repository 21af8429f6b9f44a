"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None,
    state: AdamWState,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> None:
    """Update ``params`` in place from ``grads`` (default: each param's ``.grad``).

    Parameters without a gradient are skipped but still decayed; the step
    counter advances once per call.
    """
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, param {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        new = p.data * (1.0 - lr * weight_decay) if weight_decay else p.data
        new = new - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = new.astype(p.dtype, copy=False)
