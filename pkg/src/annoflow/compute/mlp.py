"""Configurable multilayer perceptron built on the tape.

One Mlp value describes the architecture; its parameters live in a ParamStore
under a caller-chosen prefix, so several networks (flow conditioners, mixture
conditioners, prediction heads) can share one store and one optimizer.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor

_ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu}


@dataclass(frozen=True)
class Mlp:
    """Dense network: input -> hidden* -> output.

    dropout and batch_norm apply to every hidden layer (after the
    activation); the output layer is always affine.
    """

    in_features: int
    hidden: tuple = ()
    out_features: int = 1
    activation: str = "tanh"
    dropout: float = 0.0
    batch_norm: bool = False

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ConfigError("Mlp needs at least one input and one output feature")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def widths(self):
        return (self.in_features, *self.hidden, self.out_features)


def init_mlp_params(net, params, prefix, rng, zero_last=False):
    """Register one Mlp's weights under `prefix`.

    Weights are N(0, 1/sqrt(fan_in)), biases zero. With zero_last the final
    affine layer starts at exactly zero, which the flows use to begin as the
    identity map.
    """
    widths = net.widths
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        if zero_last and last:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        params.add(f"{prefix}.w{i}", w)
        params.add(f"{prefix}.b{i}", np.zeros(fan_out))
        if net.batch_norm and not last:
            _init_batch_norm(params, f"{prefix}.bn{i}", fan_out)


def _init_batch_norm(params, prefix, width):
    params.add(f"{prefix}.log_gamma", np.zeros(width))
    params.add(f"{prefix}.beta", np.zeros(width))
    params.add(f"{prefix}.running_mean", np.zeros(width), trainable=False)
    params.add(f"{prefix}.running_var", np.ones(width), trainable=False)


def batch_norm_forward(x, params, prefix, mode, momentum=0.1, eps=1e-5):
    """Normalize a (B, F) tensor per feature.

    Training mode normalizes by batch statistics (recorded on the tape, so
    gradients flow through them) and updates the running buffers in place;
    eval mode applies the frozen running statistics as constants.
    """
    log_gamma = params.tensor(f"{prefix}.log_gamma")
    beta = params.tensor(f"{prefix}.beta")
    if mode == "train":
        mean = T.tmean(x, axis=0, keepdims=True)
        centered = x - mean
        var = T.tmean(centered * centered, axis=0, keepdims=True)
        rm = params.value(f"{prefix}.running_mean")
        rv = params.value(f"{prefix}.running_var")
        params.set_value(
            f"{prefix}.running_mean", (1 - momentum) * rm + momentum * mean.data[0]
        )
        params.set_value(
            f"{prefix}.running_var", (1 - momentum) * rv + momentum * var.data[0]
        )
    else:
        mean = Tensor(params.value(f"{prefix}.running_mean")[None, :])
        var = Tensor(params.value(f"{prefix}.running_var")[None, :])
        centered = x - mean
    inv_std = (var + eps) ** -0.5
    return centered * inv_std * T.exp(log_gamma) + beta


def mlp_forward(net, params, x, prefix, mode="eval", rng=None):
    """Run the network. Accepts a Tensor or ndarray; returns the same kind.

    Dropout is active only in training mode and needs an rng; masks are
    inverted-scale so eval is the identity.
    """
    as_array = not isinstance(x, Tensor)
    h = Tensor(x) if as_array else x
    if h.data.ndim != 2:
        raise ShapeError(f"mlp_forward expects (batch, features), got {h.data.shape}")
    if h.data.shape[1] != net.in_features:
        raise ShapeError(
            f"expected {net.in_features} input features, got {h.data.shape[1]}"
        )
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    act = _ACTIVATIONS[net.activation]
    n_affine = len(net.widths) - 1
    for i in range(n_affine):
        h = T.matmul(h, params.tensor(f"{prefix}.w{i}")) + params.tensor(f"{prefix}.b{i}")
        if i == n_affine - 1:
            break
        h = act(h)
        if net.batch_norm:
            h = batch_norm_forward(h, params, f"{prefix}.bn{i}", mode)
        if net.dropout > 0.0 and mode == "train":
            if rng is None:
                raise ConfigError("dropout in training mode needs an rng")
            keep = rng.random(h.data.shape) >= net.dropout
            h = h * (keep / (1.0 - net.dropout))
    return h.data if as_array else h
