"""Minimal numpy tensor engine: layers, reverse-mode autodiff, Adam."""

from .ops import (
    RunningStats,
    add,
    batchnorm2d,
    concat,
    conv2d,
    conv_output_size,
    dense,
    flatten,
    global_avg_pool,
    log_softmax_array,
    maxpool2d,
    relu,
    reshape,
    scale,
    softmax,
    softmax_array,
    split_rows,
    sum_all,
)
from .optim import AdamState, adam_step
from .tensor import Graph, Node, Tensor, apply_op, backward, current_graph

__all__ = [
    "AdamState", "Graph", "Node", "RunningStats", "Tensor", "adam_step", "add", "apply_op",
    "backward", "batchnorm2d", "concat", "conv2d", "conv_output_size", "current_graph", "dense",
    "flatten", "global_avg_pool", "log_softmax_array", "maxpool2d", "relu", "reshape", "scale",
    "softmax", "softmax_array", "split_rows", "sum_all",
]
