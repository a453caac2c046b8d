"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


def adamw_update(p, g, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One AdamW update on numpy arrays; returns (p, m, v) as new arrays.

    `step` is the 1-based count after this update, used for bias correction.
    Decay is applied directly to the parameter and scaled by `lr`.
    """
    if not (p.shape == g.shape == m.shape == v.shape):
        raise ShapeError(f"adamw shapes disagree: p{p.shape} g{g.shape} m{m.shape} v{v.shape}")
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    p = p * (1.0 - lr * weight_decay)
    p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p.astype(g.dtype, copy=False), m.astype(g.dtype, copy=False), v.astype(g.dtype, copy=False)


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_adamw(params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> AdamWState:
    return AdamWState(
        step=0,
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def default_decay_filter(name: str, tensor: Tensor) -> bool:
    """Decay matrices only; biases, norm gains, tokens and positions are exempt."""
    return name.endswith(".weight") and tensor.ndim >= 2


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float, decay_filter=default_decay_filter) -> AdamWState:
    """Update `params` in place from their `.grad`; parameters without a grad see a zero gradient."""
    state.step += 1
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        wd = state.weight_decay if decay_filter(name, t) else 0.0
        p, m, v = adamw_update(t.data, g, state.m[name], state.v[name], state.step, lr,
                               state.beta1, state.beta2, state.eps, wd)
        t.data = p
        state.m[name] = m
        state.v[name] = v
    return state
