"""Named parameter storage shared by every model in the package."""

import numpy as np

from ..errors import ConfigError, NumericalError, ShapeError
from .tensor import Tensor


class ParamStore:
    """Flat map of unique names to float64 leaf tensors.

    Shapes are fixed at registration. Non-trainable entries (running
    statistics and similar buffers) live alongside trainable weights so a
    checkpoint is a single flat map, but they never receive gradients.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name, value, trainable=True):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable)
        # requires_grad must survive a no_grad() construction context
        tensor.requires_grad = bool(trainable)
        self._params[name] = tensor
        self._trainable[name] = bool(trainable)
        return tensor

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def tensor(self, name):
        return self._params[name]

    def value(self, name):
        return self._params[name].data

    def set_value(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        current = self._params[name].data
        if value.shape != current.shape:
            raise ShapeError(
                f"parameter {name!r} has shape {current.shape}, got {value.shape}"
            )
        self._params[name].data = value.copy()

    def names(self, trainable_only=False):
        if trainable_only:
            return [n for n in self._params if self._trainable[n]]
        return list(self._params)

    def is_trainable(self, name):
        return self._trainable[name]

    def zero_grad(self):
        for tensor in self._params.values():
            tensor.grad = None

    def snapshot(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def restore(self, snapshot):
        for name, value in snapshot.items():
            self.set_value(name, value)

    def num_values(self, trainable_only=True):
        return sum(self._params[n].data.size for n in self.names(trainable_only))


def gradient(loss, params):
    """Gradients of a recorded scalar loss with respect to a ParamStore.

    Returns {name: ndarray} covering exactly the trainable parameters.
    Raises NumericalError when the loss value is not finite.
    """
    if not isinstance(loss, Tensor):
        raise ShapeError("gradient expects the recorded loss tensor")
    if not np.all(np.isfinite(loss.data)):
        raise NumericalError("loss is not finite")
    params.zero_grad()
    loss.backward()
    grads = {}
    for name in params.names(trainable_only=True):
        g = params.tensor(name).grad
        grads[name] = np.zeros_like(params.value(name)) if g is None else g.copy()
    return grads
