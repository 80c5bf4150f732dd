from .tensor import (
    Tensor,
    add,
    as_tensor,
    avg_pool2,
    concat,
    conv2d,
    default_dtype,
    dtype_mode,
    embedding,
    exp,
    layer_norm,
    log,
    matmul,
    mul,
    power,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    sqrt,
    strict_enabled,
    strict_mode,
    reduce_mean,
    reduce_sum,
    set_default_dtype,
    set_strict,
    swapaxes,
    take,
    tanh,
    transpose,
    upsample_nearest2,
)
from .params import ParameterStore, adam_step, load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "ParameterStore",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "add",
    "as_tensor",
    "avg_pool2",
    "concat",
    "conv2d",
    "default_dtype",
    "dtype_mode",
    "embedding",
    "exp",
    "layer_norm",
    "log",
    "matmul",
    "mul",
    "power",
    "relu",
    "reshape",
    "sigmoid",
    "silu",
    "softmax",
    "sqrt",
    "strict_enabled",
    "strict_mode",
    "reduce_mean",
    "reduce_sum",
    "set_default_dtype",
    "set_strict",
    "swapaxes",
    "take",
    "tanh",
    "transpose",
    "upsample_nearest2",
]
