from .tensor import Tensor, no_grad, grad_enabled
from .params import ParamStore, gradient
from .mlp import Mlp, init_mlp_params, mlp_forward, batch_norm_forward
from .optim import AdamState, init_adam, adam_step, clip_gradients
from .check import finite_diff_check
from .checkpoint import (
    FORMAT_VERSION,
    load_checkpoint,
    save_checkpoint,
    params_from_dict,
    params_to_dict,
    write_json_atomic,
)
from . import tensor

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "ParamStore",
    "gradient",
    "Mlp",
    "init_mlp_params",
    "mlp_forward",
    "batch_norm_forward",
    "AdamState",
    "init_adam",
    "adam_step",
    "clip_gradients",
    "finite_diff_check",
    "FORMAT_VERSION",
    "load_checkpoint",
    "save_checkpoint",
    "params_from_dict",
    "params_to_dict",
    "write_json_atomic",
    "tensor",
]
