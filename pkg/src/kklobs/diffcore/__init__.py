"""Minimal differentiable-computation engine: graphs, reverse/forward mode, Adam."""

from .graph import (
    Graph,
    GraphError,
    Var,
    concat,
    evaluate,
    gradient,
    jvp,
    reduce_sum,
    reshape,
    sigmoid,
    slice_cols,
    sqnorm,
    tanh,
)
from .optim import (
    AdamState,
    CosineSchedule,
    PlateauSchedule,
    adam_step,
    clip_global_norm,
    global_norm,
)

__all__ = [
    "Graph", "GraphError", "Var",
    "evaluate", "gradient", "jvp",
    "tanh", "sigmoid", "concat", "slice_cols", "reshape", "reduce_sum", "sqnorm",
    "AdamState", "adam_step", "clip_global_norm", "global_norm",
    "CosineSchedule", "PlateauSchedule",
]
