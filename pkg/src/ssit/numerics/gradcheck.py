"""Central finite-difference checks for backward()."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, default_dtype


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def numeric_grad(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], wrt: int, h: float = 1e-6) -> np.ndarray:
    """Full finite-difference gradient of scalar f with respect to arrays[wrt]."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[wrt]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with default_dtype(np.float64):
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(*[Tensor(a) for a in base]).item()
            flat[i] = old - h
            fm = f(*[Tensor(a) for a in base]).item()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(f: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    with default_dtype(np.float64):
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        backward(f(*ts))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def check_grads(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-6) -> list[float]:
    """Relative error between backward() and finite differences for every input."""
    analytic = analytic_grads(f, arrays)
    return [rel_error(analytic[i], numeric_grad(f, arrays, i, h)) for i in range(len(arrays))]


def directional_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], rng: np.random.Generator,
                      h: float = 1e-3, coords: int = 2) -> dict[str, float]:
    """Per-tensor check of backward() against central differences.

    For each parameter tensor, compares the gradient's projection on a random unit
    direction and on `coords` random coordinates with the matching finite differences;
    returns the relative error of that projection vector per tensor. `params` must be
    float64 leaves that `loss_fn` reads.
    """
    for t in params.values():
        t.zero_grad()
    backward(loss_fn())
    errors = {}
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        dirs = []
        v = rng.standard_normal(t.shape)
        dirs.append(v / np.linalg.norm(v))
        for idx in rng.choice(t.size, size=min(coords, t.size), replace=False):
            e = np.zeros(t.size)
            e[idx] = 1.0
            dirs.append(e.reshape(t.shape))
        analytic, numeric = [], []
        orig = t.data
        for d in dirs:
            t.data = orig + h * d
            fp = loss_fn().item()
            t.data = orig - h * d
            fm = loss_fn().item()
            t.data = orig
            numeric.append((fp - fm) / (2 * h))
            analytic.append(float((g * d).sum()))
        errors[name] = rel_error(np.array(analytic), np.array(numeric), floor=1e-8)
    return errors
