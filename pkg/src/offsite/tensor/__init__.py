"""Minimal deterministic reverse-mode autodiff over numpy arrays."""
from .engine import (
    GradError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    causal_softmax,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean_all,
    mul,
    no_grad,
    reshape,
    softmax_cross_entropy,
    split_last,
    sub,
    sum_all,
    transpose,
)
from .kernels import BACKEND
from .optim import LrSchedule, OptimizerError, OptimizerState, adamw_step, cosine_lr

__all__ = [
    "BACKEND",
    "GradError",
    "LrSchedule",
    "OptimizerError",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "add",
    "as_tensor",
    "backward",
    "causal_softmax",
    "cosine_lr",
    "embedding",
    "gelu",
    "layer_norm",
    "linear",
    "matmul",
    "mean_all",
    "mul",
    "no_grad",
    "reshape",
    "softmax_cross_entropy",
    "split_last",
    "sub",
    "sum_all",
    "transpose",
]
