"""First-order optimizers used by the prior tuner and MAP training.

All steppers are pure functions over ``(params, grads, state)`` so callers
control every bit of mutable state; ``params`` and ``grads`` may be single
arrays or dicts of arrays with matching keys.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-8


def _map_pair(params, grads, fn):
    if isinstance(params, dict):
        return {k: fn(k, params[k], grads[k]) for k in params}
    return fn(None, params, grads)


def _zeros_like(params):
    if isinstance(params, dict):
        return {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    return np.zeros_like(np.asarray(params, dtype=np.float64))


def global_norm(grads) -> float:
    vals = grads.values() if isinstance(grads, dict) else [grads]
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in vals)))


def clip_global_norm(grads, max_norm: float):
    """Rescale so the concatenated gradient norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    if isinstance(grads, dict):
        return {k: g * scale for k, g in grads.items()}
    return grads * scale


def adagrad_init(params):
    return _zeros_like(params)


def adagrad_step(params, grads, state, lr: float):
    """Accumulated squared gradients; step ``lr * g / (sqrt(acc) + eps)``."""

    def upd(key, p, g):
        acc = state[key] if key is not None else state
        acc += np.square(g)
        return p - lr * g / (np.sqrt(acc) + EPS)

    return _map_pair(params, grads, upd), state


def rmsprop_init(params):
    return _zeros_like(params)


def rmsprop_step(params, grads, state, lr: float, rho: float = 0.99):
    """Decaying average of squared gradients; step ``lr * g / (sqrt(acc) + eps)``."""

    def upd(key, p, g):
        acc = state[key] if key is not None else state
        acc *= rho
        acc += (1.0 - rho) * np.square(g)
        return p - lr * g / (np.sqrt(acc) + EPS)

    return _map_pair(params, grads, upd), state


def adam_init(params):
    return {"m": _zeros_like(params), "v": _zeros_like(params), "t": 0}


def adam_step(params, grads, state, lr: float, beta1: float = 0.9, beta2: float = 0.999):
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t

    def upd(key, p, g):
        m = state["m"][key] if key is not None else state["m"]
        v = state["v"][key] if key is not None else state["v"]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        return p - lr * (m / c1) / (np.sqrt(v / c2) + EPS)

    return _map_pair(params, grads, upd), state
