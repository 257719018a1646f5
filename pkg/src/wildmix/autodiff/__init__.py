"""Reverse-mode differentiation on numpy arrays, plus Adam."""
from .gradcheck import check_gradients, finite_diff_check
from .nn import Conv1d, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, parameter
from .ops import (
    add,
    conv1d_same,
    cross_attention,
    dropout,
    layer_norm,
    linear,
    matmul,
    mean,
    mse,
    mul,
    multi_head_attention,
    permute,
    relu,
    relu_margin,
    reshape,
    self_attention,
    softmax,
    sum_,
    transpose,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, backward, get_default_dtype, set_default_dtype

__all__ = [
    "Adam", "AdamState", "Conv1d", "FeedForward", "LayerNorm", "Linear", "Module",
    "MultiHeadAttention", "Tensor", "adam_step", "add", "as_tensor", "backward",
    "check_gradients", "conv1d_same", "cross_attention", "dropout", "finite_diff_check",
    "get_default_dtype", "layer_norm", "linear", "matmul", "mean", "mse", "mul",
    "multi_head_attention", "parameter", "permute", "relu", "relu_margin", "reshape", "self_attention",
    "set_default_dtype", "softmax", "sum_", "transpose",
]
