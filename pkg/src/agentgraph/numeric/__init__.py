from agentgraph.numeric.optim import OptimizerState, adam_step, plateau_update
from agentgraph.numeric.random import glorot_uniform, make_rng
from agentgraph.numeric.tensor import (
    DetachedLossWarning,
    GradientTape,
    Tensor,
    add,
    backward,
    clamp,
    concat,
    constant,
    exp,
    hadamard,
    l1_norm,
    leaky_relu,
    log,
    matmul,
    mean,
    mean_pool_rows,
    mul,
    no_grad,
    parameter,
    relu,
    scale,
    sigmoid,
    softmax,
    sub,
    take_rows,
    transpose,
)
from agentgraph.numeric.tensor import sum as tsum

__all__ = [
    "DetachedLossWarning", "GradientTape", "OptimizerState", "Tensor", "adam_step", "add",
    "backward", "clamp", "concat", "constant", "exp", "glorot_uniform", "hadamard", "l1_norm",
    "leaky_relu", "log", "make_rng", "matmul", "mean", "mean_pool_rows", "mul", "no_grad", "parameter",
    "plateau_update", "relu", "scale", "sigmoid", "softmax", "sub", "take_rows", "transpose",
    "tsum",
]
