from .engine import (
    DiffArray,
    DimensionError,
    InputTooShortError,
    Tape,
    add,
    as_diff,
    backward,
    bce_with_logits,
    concat,
    conv_output_length,
    elementwise,
    expand,
    gelu,
    getitem,
    grouped_conv1d,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_axis,
    softmax,
    softmax_lastdim,
    structural,
    sub,
    sum,
    tanh,
    transpose,
    zero_grads,
)
from .gradcheck import finite_diff_check, gradient_pairs, relative_error

__all__ = [
    "DiffArray",
    "DimensionError",
    "InputTooShortError",
    "Tape",
    "add",
    "as_diff",
    "backward",
    "bce_with_logits",
    "concat",
    "conv_output_length",
    "elementwise",
    "expand",
    "finite_diff_check",
    "gelu",
    "getitem",
    "gradient_pairs",
    "grouped_conv1d",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "slice_axis",
    "softmax",
    "softmax_lastdim",
    "structural",
    "sub",
    "sum",
    "tanh",
    "transpose",
    "zero_grads",
]
