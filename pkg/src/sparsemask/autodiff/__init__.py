"""Minimal reverse-mode tensor engine."""

from .ops import (
    BatchNormState,
    ConvKernel,
    batch_norm,
    bilinear_upsample,
    concat_channels,
    conv2d,
    global_avg_pool,
    interpolation_matrix,
    softmax_cross_entropy,
    split_channels,
)
from .optim import SGD, OptimizerState, ParamGroup, poly_lr
from .tensor import (
    Tensor,
    absolute,
    add,
    as_tensor,
    clamp,
    log,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    stack,
    sub,
    tmean,
    tsum,
)

__all__ = [
    "BatchNormState", "ConvKernel", "SGD", "OptimizerState", "ParamGroup", "Tensor",
    "absolute", "add", "as_tensor", "batch_norm", "bilinear_upsample", "clamp",
    "concat_channels", "conv2d", "global_avg_pool", "interpolation_matrix", "log", "mul",
    "no_grad", "poly_lr", "relu", "reshape", "scale", "sigmoid", "softmax_cross_entropy",
    "split_channels", "stack", "sub", "tmean", "tsum",
]
