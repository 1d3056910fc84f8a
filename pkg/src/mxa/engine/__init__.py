from .gradcheck import GradcheckReport, gradient_check
from .ops import (
    add,
    concat,
    elementwise,
    matmul,
    mean,
    mul,
    neg,
    pad,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    softplus,
    stable_sigmoid,
    stable_softplus,
    sub,
    sum_,
    transpose,
)
from .serialize import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .spatial import bilinear_crop_resize, conv2d, pool
from .tensor import Tape, Tensor, as_tensor, current_tape, make_output

__all__ = [
    "GradcheckReport", "Tape", "Tensor", "add", "as_tensor", "bilinear_crop_resize",
    "concat", "conv2d", "current_tape", "make_output", "elementwise", "gradient_check", "load_tensor",
    "matmul", "mean", "mul", "neg", "pad", "pool", "relu", "reshape", "save_tensor",
    "scale", "sigmoid", "slice_", "softmax", "softplus", "stable_sigmoid",
    "stable_softplus", "sub", "sum_", "tensor_from_bytes", "tensor_to_bytes", "transpose",
]
