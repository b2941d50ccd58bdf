"""Tensor arithmetic and reverse-mode autodiff."""

from glf.core.functional import batchnorm, conv2d, conv_transpose2d, pad2d
from glf.core.gradcheck import grad_check, numerical_grad
from glf.core.tensor import (
    ComputationTape,
    Parameter,
    Tensor,
    add,
    add_bias,
    as_tensor,
    backward,
    concat,
    exp,
    expand,
    log,
    make_op,
    matmul,
    mul,
    neg,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    split,
    square,
    sub,
    tanh,
    transpose,
)

__all__ = [
    "ComputationTape", "Parameter", "Tensor", "add", "add_bias", "as_tensor", "backward",
    "batchnorm", "concat", "conv2d", "conv_transpose2d", "exp", "expand", "grad_check",
    "log", "make_op", "matmul", "mul", "neg", "no_grad", "numerical_grad", "pad2d", "reduce_mean",
    "reduce_sum", "relu", "reshape", "scale", "split", "square", "sub", "tanh", "transpose",
]
