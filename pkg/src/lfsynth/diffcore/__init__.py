"""Dense float64 tensors with reverse-mode automatic differentiation."""

from lfsynth.diffcore.gradcheck import GradcheckReport, gradcheck, relative_error
from lfsynth.diffcore.ops import (
    absolute,
    add,
    bilinear_resize,
    clip,
    concat,
    concat_channels,
    conv2d,
    conv2d_transpose,
    getitem,
    grid_sample,
    leaky_relu,
    mean,
    mul,
    neg,
    reduce_mean_var,
    reduce_sum,
    reshape,
    scale,
    square,
    stack,
    sub,
    tensor,
    transpose,
)
from lfsynth.diffcore.tensor import DTYPE, Tape, Tensor, active_tape, backward

__all__ = [
    "DTYPE",
    "GradcheckReport",
    "Tape",
    "Tensor",
    "absolute",
    "active_tape",
    "add",
    "backward",
    "bilinear_resize",
    "clip",
    "concat",
    "concat_channels",
    "conv2d",
    "conv2d_transpose",
    "getitem",
    "gradcheck",
    "grid_sample",
    "leaky_relu",
    "mean",
    "mul",
    "neg",
    "reduce_mean_var",
    "reduce_sum",
    "relative_error",
    "reshape",
    "scale",
    "square",
    "stack",
    "sub",
    "tensor",
    "transpose",
]
