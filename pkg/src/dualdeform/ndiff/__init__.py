"""Minimal reverse-mode autodiff over dense float64 arrays."""
from .flg4 import decode_flg4, encode_flg4, read_flg4, write_flg4
from .gradcheck import finite_diff_check
from .tensor import (
    Function,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp,
    clamp_st,
    concat,
    cos,
    div,
    exp,
    l2norm,
    log,
    matmul,
    max,
    mean,
    min,
    mul,
    no_grad,
    op_elementwise,
    op_reduce,
    parameter,
    relu,
    sigmoid,
    sin,
    slice_,
    softmax,
    sqrt,
    stack,
    stop_gradient,
    sub,
    sum,
    tanh,
    where,
)

__all__ = [
    "Function", "Tensor", "add", "as_tensor", "backward", "clamp", "clamp_st",
    "concat", "cos", "decode_flg4", "div", "encode_flg4", "exp",
    "finite_diff_check", "l2norm", "log", "matmul", "max", "mean", "min", "mul",
    "no_grad", "op_elementwise", "op_reduce", "parameter", "read_flg4", "relu",
    "sigmoid", "sin", "slice_", "softmax", "sqrt", "stack", "stop_gradient",
    "sub", "sum", "tanh", "where", "write_flg4",
]
