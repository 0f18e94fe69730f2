"""Reverse-mode automatic differentiation on float64 numpy arrays."""

from .checkpoint import load_params, save_params
from .functional import conv2d, conv_transpose2d, elu, group_norm, linear, softplus
from .optim import Adam, AdamState, adam_step, cosine_lr
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    concat,
    count_activations,
    is_grad_enabled,
    matmul,
    no_grad,
    stack,
)

__all__ = [
    "Adam", "AdamState", "Tensor", "adam_step", "as_tensor", "backward", "concat", "conv2d",
    "conv_transpose2d", "cosine_lr", "count_activations", "elu", "group_norm", "is_grad_enabled",
    "linear", "load_params", "matmul", "no_grad", "save_params", "softplus", "stack",
]
