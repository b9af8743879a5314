"""Minimal reverse-mode array engine for the mosaic networks."""
from .array import (
    DiffArray,
    ShapeError,
    SubstrateError,
    abs_,
    activation,
    add,
    alloc_count,
    backward,
    clip,
    concat,
    div,
    exp,
    grad_enabled,
    leaky_relu,
    log,
    make_op,
    mean_all,
    mul,
    narrow,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    reset_alloc_count,
    sigmoid,
    sqrt,
    sub,
    sum_all,
    tanh,
)
from .layers import (
    BatchNorm2d,
    Conv2d,
    UpsampleConv2d,
    avg_pool,
    batch_norm,
    conv2d,
    conv2d_input_grad,
    softmax_channels,
    upsample_conv,
    upsample_nearest,
)
from .optim import Parameter, adam_step
from .random import RngState

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "DiffArray",
    "Parameter",
    "RngState",
    "ShapeError",
    "SubstrateError",
    "UpsampleConv2d",
    "abs_",
    "activation",
    "adam_step",
    "alloc_count",
    "avg_pool",
    "backward",
    "batch_norm",
    "clip",
    "concat",
    "conv2d",
    "conv2d_input_grad",
    "exp",
    "grad_enabled",
    "leaky_relu",
    "log",
    "make_op",
    "mean_all",
    "narrow",
    "no_grad",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reset_alloc_count",
    "sigmoid",
    "softmax_channels",
    "sqrt",
    "sum_all",
    "tanh",
    "upsample_conv",
    "upsample_nearest",
]
