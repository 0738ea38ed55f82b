"""Minimal reverse-mode differentiation over numpy arrays."""
from .gradcheck import grad_check
from .norm import NORM_MODES, NormParams, batch_norm
from .ops import (
    add,
    append_embedding,
    concat,
    conv1d,
    dropout,
    gated_residual,
    getitem,
    matmul,
    mul,
    sigmoid,
    softmax_columns,
    sub,
    sum_all,
    transpose,
    weighted_l1,
    weighted_sum,
)
from .tensor import ParamStore, Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "NORM_MODES", "NormParams", "ParamStore", "Tensor", "add", "append_embedding",
    "as_tensor", "batch_norm", "concat", "conv1d", "dropout", "gated_residual",
    "getitem", "grad_check", "grad_enabled", "matmul", "mul", "no_grad", "sigmoid",
    "softmax_columns", "sub", "sum_all", "transpose", "weighted_l1", "weighted_sum",
]
