"""Minimal reverse-mode automatic differentiation over float64 numpy arrays."""
from .kernels import BACKEND
from .ops import (
    BatchNormStats,
    add,
    batch_norm,
    bce_with_logits,
    concat,
    conv2d,
    conv_output_size,
    dropout,
    flatten,
    fully_connected,
    gather_rows,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    square,
    sub,
    sum,
)
from .tensor import Graph, Node, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "BACKEND", "BatchNormStats", "Graph", "Node", "Tensor", "add", "backward",
    "batch_norm", "bce_with_logits", "concat", "conv2d", "conv_output_size",
    "dropout", "flatten", "fully_connected", "gather_rows", "is_grad_enabled",
    "mean", "mul", "no_grad", "relu", "reshape", "sigmoid", "square", "sub", "sum",
]
