"""Gradient verification by central finite differences.

This is the only trusted oracle for the autodiff engine: every analytic
gradient the package relies on is validated against it in the test suite.
"""

import numpy as np

from ..errors import NumericalError
from .params import gradient


def finite_diff_check(loss_fn, params, epsilon=1e-5):
    """Max relative disagreement between analytic and central-difference grads.

    loss_fn rebuilds the loss graph from the current parameter values and
    must be deterministic (eval mode, or training mode without dropout).
    The relative error for one coordinate is
    |analytic - central| / max(|analytic|, |central|, 1e-12).
    """
    analytic = gradient(loss_fn(), params)
    worst = 0.0
    for name in params.names(trainable_only=True):
        base = params.value(name).copy()
        flat = base.ravel()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            for sign in (+1.0, -1.0):
                bumped = flat.copy()
                bumped[i] += sign * epsilon
                params.set_value(name, bumped.reshape(base.shape))
                value = float(loss_fn().data)
                if not np.isfinite(value):
                    params.set_value(name, base)
                    raise NumericalError(
                        f"loss not finite at perturbed parameter {name!r}"
                    )
                numeric[i] += sign * value
        numeric /= 2.0 * epsilon
        params.set_value(name, base)
        a = analytic[name].ravel()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
