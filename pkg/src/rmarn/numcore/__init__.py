"""Minimal reverse-mode differentiable tensor engine."""
from . import kernels
from .functional import (
    concat,
    conv2d,
    conv2d_mean,
    dropout,
    einsum,
    extent_mask,
    gelu,
    l2_normalize,
    layer_norm,
    log_softmax,
    masked_max,
    matmul,
    soft_threshold,
    softmax,
    softmax_rows,
    softplus,
    spatial_mean,
)
from .gradcheck import GradCheckReport, check_gradients, relative_error, scalar_probe
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, is_grad_enabled, no_grad, parameter

__all__ = [
    "Adam",
    "AdamState",
    "GradCheckReport",
    "Tensor",
    "adam_step",
    "as_tensor",
    "check_gradients",
    "concat",
    "conv2d",
    "conv2d_mean",
    "dropout",
    "einsum",
    "extent_mask",
    "gelu",
    "is_grad_enabled",
    "kernels",
    "l2_normalize",
    "layer_norm",
    "log_softmax",
    "masked_max",
    "matmul",
    "no_grad",
    "parameter",
    "relative_error",
    "scalar_probe",
    "soft_threshold",
    "softmax",
    "softmax_rows",
    "softplus",
    "spatial_mean",
]
