"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from .gradcheck import GradCheckReport, grad_check
from .ops import (
    NEG_INF,
    add,
    columns,
    concat,
    conv1d,
    conv_output_length,
    cross_entropy_ignore,
    embedding_lookup,
    gelu,
    layernorm,
    masked_softmax,
    matmul,
    mean,
    mul,
    scale,
    sub,
    total,
    transpose,
)
from .optim import OptimizerConfig, OptimizerState, optimizer_step
from .tensor import (
    BackwardResult,
    ContractError,
    DimensionError,
    FrozenTensorError,
    Graph,
    Tensor,
    backward,
    unused_parameters,
)

__all__ = [
    "NEG_INF",
    "BackwardResult",
    "ContractError",
    "DimensionError",
    "FrozenTensorError",
    "GradCheckReport",
    "Graph",
    "OptimizerConfig",
    "OptimizerState",
    "Tensor",
    "add",
    "backward",
    "columns",
    "concat",
    "conv1d",
    "conv_output_length",
    "cross_entropy_ignore",
    "embedding_lookup",
    "gelu",
    "grad_check",
    "layernorm",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "optimizer_step",
    "scale",
    "sub",
    "total",
    "transpose",
    "unused_parameters",
]
