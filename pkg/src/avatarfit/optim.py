"""Bias-corrected adaptive-moment (Adam) update on flat numpy arrays."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), 0)


def adam_direction(grads, state: AdamState, betas=(0.9, 0.999), epsilon=1e-8, shared_axis=None):
    """Bias-corrected Adam step direction (to be scaled by the learning rate).

    With ``shared_axis`` the second-moment estimate is averaged over that
    axis, so e.g. the three coordinates of a vertex share one step scale and
    the step keeps the gradient's direction within each group.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.m.shape:
        raise ValueError(f"shape mismatch: grads {grads.shape}, state {state.m.shape}")
    b1, b2 = betas
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grads
    g2 = grads * grads
    if shared_axis is not None:
        g2 = np.broadcast_to(g2.mean(axis=shared_axis, keepdims=True), g2.shape)
    v = b2 * state.v + (1.0 - b2) * g2
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return m_hat / (np.sqrt(v_hat) + epsilon), AdamState(m, v, t)


def optimizer_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), epsilon=1e-8):
    """One Adam step. Returns ``(new_params, new_state)``; inputs are not modified.

    ``lr`` may be a scalar or an array broadcastable against ``params``.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.shape != np.shape(grads):
        raise ValueError(f"shape mismatch: params {params.shape}, grads {np.shape(grads)}")
    direction, state = adam_direction(grads, state, betas, epsilon)
    return params - lr * direction, state


def cosine_schedule(base_lr: float, step: int, total: int, final_factor: float) -> float:
    """Cosine decay from ``base_lr`` to ``base_lr * final_factor`` over ``total`` steps."""
    if total <= 1:
        return base_lr
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return base_lr * (final_factor + (1.0 - final_factor) * 0.5 * (1.0 + math.cos(math.pi * frac)))
