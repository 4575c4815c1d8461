"""Minimal differentiable kernels for the fall-detection network."""
from .ops import (
    BatchNorm,
    add,
    batchnorm,
    batchnorm_add_relu,
    block_temporal_drop,
    conv1x1,
    depthwise_temporal_conv,
    graph_aggregate,
    linear,
    linear_softmax_ce,
    modulate,
    pool,
    project_spatial_max,
    random_st_mask,
    relu,
    sep_temporal_conv,
    softmax,
    softmax_cross_entropy,
    temporal_diff,
    temporal_out_len,
)
from .tensor import Param, Tape, Tensor

__all__ = [
    "BatchNorm", "Param", "Tape", "Tensor", "add", "batchnorm", "batchnorm_add_relu", "block_temporal_drop",
    "conv1x1", "depthwise_temporal_conv", "graph_aggregate", "linear", "linear_softmax_ce",
    "modulate", "pool", "project_spatial_max", "random_st_mask", "relu", "sep_temporal_conv", "softmax",
    "softmax_cross_entropy", "temporal_diff", "temporal_out_len",
]
