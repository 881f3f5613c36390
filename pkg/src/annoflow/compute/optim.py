"""Adam optimizer over a ParamStore."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError, OptimizerError


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params, lr):
    state = AdamState(lr=float(lr))
    for name in params.names(trainable_only=True):
        shape = params.value(name).shape
        state.m[name] = np.zeros(shape)
        state.v[name] = np.zeros(shape)
    return state


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name in params.names(trainable_only=True):
        if name not in grads:
            raise OptimizerError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1**t)
        v_hat = state.v[name] / (1 - state.beta2**t)
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        params.set_value(name, params.value(name) - update)


def clip_gradients(grads, max_norm):
    """Scale the whole gradient set so its global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads, norm
