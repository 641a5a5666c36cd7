"""Minimal reverse-mode automatic differentiation over numpy arrays."""
from .graph import GradientSet, backward, checkpoint_segment, evaluate_graph, finite_diff_check
from .tensor import (
    SMOOTH_ABS_DELTA,
    Tape,
    Tensor,
    add,
    affine,
    clip,
    as_tensor,
    concatenate,
    cos,
    current_tape,
    exp,
    log,
    logistic,
    matmul,
    mean,
    multiply,
    negate,
    no_grad,
    reshape,
    scale,
    silu,
    sin,
    slice_,
    smooth_abs,
    sqrt,
    square,
    subtract,
    sum_,
)

__all__ = [
    "GradientSet", "SMOOTH_ABS_DELTA", "Tape", "Tensor", "add", "affine", "as_tensor", "clip",
    "backward", "checkpoint_segment", "concatenate", "cos", "current_tape",
    "evaluate_graph", "exp", "finite_diff_check", "log", "logistic", "matmul", "mean",
    "multiply", "negate", "no_grad", "reshape", "scale", "silu", "sin", "slice_",
    "smooth_abs", "sqrt", "square", "subtract", "sum_",
]
